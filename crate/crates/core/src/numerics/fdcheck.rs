//! Finite-difference validation of every differentiable tape operation.
//!
//! For each op a small graph is built, reduced to a scalar through a fixed
//! probe weighting, and the tape's analytic gradients are compared against
//! central finite differences element by element. Each op runs over three
//! distinct shape sets with seeded random values; inputs for kinked ops
//! (`relu`, `abs`) are kept away from the kink so the comparison is
//! well-posed.
//!
//! The relative error uses a floor of 1e-3 in the denominator: central
//! differences carry ~1e-10 absolute noise, so a healthy gradient shows
//! errors around 1e-8 while any wrong formula shows errors of order 1.

use crate::error::Result;
use crate::numerics::rng::SeededRng;
use crate::numerics::tape::GradTape;
use crate::numerics::tensor::NdTensor;

/// Worst-case finite-difference disagreement for one op.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub op: String,
    pub max_rel_err: f64,
}

type Builder = fn(&mut GradTape, &[NdTensor]) -> Result<NdTensor>;

struct OpCase {
    name: &'static str,
    /// Input shapes for rounds 0..3.
    shapes: [&'static [&'static [usize]]; 3],
    /// Inputs that must stay strictly positive (denominators).
    positive: &'static [bool],
    build: Builder,
}

/// Deterministic probe weights so the scalar loss sees every output element
/// with a distinct coefficient.
fn probe_loss(tape: &mut GradTape, out: &NdTensor) -> Result<NdTensor> {
    let probe = NdTensor::from_fn(out.shape(), |i| 0.35 + 0.06 * ((i * 37 + 11) % 13) as f64);
    let weighted = tape.mul(out, &probe)?;
    tape.sum_all(&weighted)
}

fn cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "add",
            shapes: [&[&[2, 3], &[2, 3]], &[&[5], &[5]], &[&[3, 1, 2], &[3, 1, 2]]],
            positive: &[false, false],
            build: |t, x| {
                let y = t.add(&x[0], &x[1])?;
                probe_loss(t, &y)
            },
        },
        OpCase {
            name: "add_scalar_broadcast",
            shapes: [&[&[2, 3], &[1]], &[&[1], &[4]], &[&[2, 2], &[1]]],
            positive: &[false, false],
            build: |t, x| {
                let y = t.add(&x[0], &x[1])?;
                probe_loss(t, &y)
            },
        },
        OpCase {
            name: "sub",
            shapes: [&[&[2, 3], &[2, 3]], &[&[1], &[3, 2]], &[&[4], &[1]]],
            positive: &[false, false],
            build: |t, x| {
                let y = t.sub(&x[0], &x[1])?;
                probe_loss(t, &y)
            },
        },
        OpCase {
            name: "mul",
            shapes: [&[&[2, 3], &[2, 3]], &[&[5], &[5]], &[&[2, 2, 2], &[2, 2, 2]]],
            positive: &[false, false],
            build: |t, x| {
                let y = t.mul(&x[0], &x[1])?;
                probe_loss(t, &y)
            },
        },
        OpCase {
            name: "mul_scalar_broadcast",
            shapes: [&[&[2, 3], &[1]], &[&[1], &[4]], &[&[3, 3], &[1]]],
            positive: &[false, false],
            build: |t, x| {
                let y = t.mul(&x[0], &x[1])?;
                probe_loss(t, &y)
            },
        },
        OpCase {
            name: "div",
            shapes: [&[&[2, 3], &[2, 3]], &[&[5], &[5]], &[&[2, 2], &[2, 2]]],
            positive: &[false, true],
            build: |t, x| {
                let y = t.div(&x[0], &x[1])?;
                probe_loss(t, &y)
            },
        },
        OpCase {
            name: "div_scalar_denominator",
            shapes: [&[&[2, 3], &[1]], &[&[4], &[1]], &[&[3, 2], &[1]]],
            positive: &[false, true],
            build: |t, x| {
                let y = t.div(&x[0], &x[1])?;
                probe_loss(t, &y)
            },
        },
        OpCase {
            name: "div_scalar_numerator",
            shapes: [&[&[1], &[2, 3]], &[&[1], &[4]], &[&[1], &[2, 2]]],
            positive: &[false, true],
            build: |t, x| {
                let y = t.div(&x[0], &x[1])?;
                probe_loss(t, &y)
            },
        },
        OpCase {
            name: "add_const",
            shapes: [&[&[2, 3]], &[&[5]], &[&[1]]],
            positive: &[false],
            build: |t, x| {
                let y = t.add_const(&x[0], 0.7)?;
                probe_loss(t, &y)
            },
        },
        OpCase {
            name: "scale",
            shapes: [&[&[2, 3]], &[&[5]], &[&[1]]],
            positive: &[false],
            build: |t, x| {
                let y = t.scale(&x[0], -1.3)?;
                probe_loss(t, &y)
            },
        },
        OpCase {
            name: "matmul",
            shapes: [
                &[&[2, 3], &[3, 4]],
                &[&[1, 5], &[5, 2]],
                &[&[4, 2], &[2, 3]],
            ],
            positive: &[false, false],
            build: |t, x| {
                let y = t.matmul(&x[0], &x[1])?;
                probe_loss(t, &y)
            },
        },
        OpCase {
            name: "matmul_nt",
            shapes: [
                &[&[2, 3], &[4, 3]],
                &[&[1, 5], &[2, 5]],
                &[&[3, 2], &[3, 2]],
            ],
            positive: &[false, false],
            build: |t, x| {
                let y = t.matmul_nt(&x[0], &x[1])?;
                probe_loss(t, &y)
            },
        },
        OpCase {
            name: "add_row",
            shapes: [&[&[3, 4], &[4]], &[&[2, 2], &[1, 2]], &[&[5, 3], &[3]]],
            positive: &[false, false],
            build: |t, x| {
                let y = t.add_row(&x[0], &x[1])?;
                probe_loss(t, &y)
            },
        },
        OpCase {
            name: "select_row",
            shapes: [&[&[3, 4]], &[&[2, 5]], &[&[4, 2]]],
            positive: &[false],
            build: |t, x| {
                let y = t.select_row(&x[0], 1)?;
                probe_loss(t, &y)
            },
        },
        OpCase {
            name: "concat_rows",
            shapes: [
                &[&[2, 3], &[1, 3], &[3, 3]],
                &[&[1, 2], &[1, 2], &[1, 2]],
                &[&[2, 4], &[3, 4], &[1, 4]],
            ],
            positive: &[false, false, false],
            build: |t, x| {
                let y = t.concat_rows(&[&x[0], &x[1], &x[2]])?;
                probe_loss(t, &y)
            },
        },
        OpCase {
            name: "slice_cols",
            shapes: [&[&[3, 5]], &[&[2, 4]], &[&[4, 6]]],
            positive: &[false],
            build: |t, x| {
                let y = t.slice_cols(&x[0], 1, 2)?;
                probe_loss(t, &y)
            },
        },
        OpCase {
            name: "concat_cols",
            shapes: [
                &[&[3, 2], &[3, 4]],
                &[&[2, 1], &[2, 2]],
                &[&[4, 3], &[4, 1]],
            ],
            positive: &[false, false],
            build: |t, x| {
                let y = t.concat_cols(&[&x[0], &x[1]])?;
                probe_loss(t, &y)
            },
        },
        OpCase {
            name: "reshape",
            shapes: [&[&[2, 6]], &[&[4, 2]], &[&[12]]],
            positive: &[false],
            build: |t, x| {
                let y = t.reshape(&x[0], &[x[0].numel() / 2, 2])?;
                probe_loss(t, &y)
            },
        },
        OpCase {
            name: "softmax_rows",
            shapes: [&[&[3, 4]], &[&[1, 6]], &[&[5, 2]]],
            positive: &[false],
            build: |t, x| {
                let y = t.softmax_rows(&x[0])?;
                probe_loss(t, &y)
            },
        },
        OpCase {
            name: "relu",
            shapes: [&[&[2, 3]], &[&[7]], &[&[3, 3]]],
            positive: &[false],
            build: |t, x| {
                let y = t.relu(&x[0])?;
                probe_loss(t, &y)
            },
        },
        OpCase {
            name: "tanh",
            shapes: [&[&[2, 3]], &[&[7]], &[&[3, 3]]],
            positive: &[false],
            build: |t, x| {
                let y = t.tanh(&x[0])?;
                probe_loss(t, &y)
            },
        },
        OpCase {
            name: "sigmoid",
            shapes: [&[&[2, 3]], &[&[7]], &[&[3, 3]]],
            positive: &[false],
            build: |t, x| {
                let y = t.sigmoid(&x[0])?;
                probe_loss(t, &y)
            },
        },
        OpCase {
            name: "gelu",
            shapes: [&[&[2, 3]], &[&[7]], &[&[3, 3]]],
            positive: &[false],
            build: |t, x| {
                let y = t.gelu(&x[0])?;
                probe_loss(t, &y)
            },
        },
        OpCase {
            name: "abs",
            shapes: [&[&[2, 3]], &[&[7]], &[&[3, 3]]],
            positive: &[false],
            build: |t, x| {
                let y = t.abs(&x[0])?;
                probe_loss(t, &y)
            },
        },
        OpCase {
            name: "sum_all",
            shapes: [&[&[2, 3]], &[&[7]], &[&[1]]],
            positive: &[false],
            build: |t, x| t.sum_all(&x[0]),
        },
        OpCase {
            name: "mean_all",
            shapes: [&[&[2, 3]], &[&[7]], &[&[1]]],
            positive: &[false],
            build: |t, x| t.mean_all(&x[0]),
        },
        OpCase {
            name: "std_all",
            shapes: [&[&[2, 3]], &[&[7]], &[&[4, 2]]],
            positive: &[false],
            build: |t, x| t.std_all(&x[0], 1e-5),
        },
        OpCase {
            name: "normalize",
            shapes: [&[&[1, 6]], &[&[7]], &[&[2, 4]]],
            positive: &[false],
            build: |t, x| {
                let y = t.normalize(&x[0], 1e-8)?;
                probe_loss(t, &y)
            },
        },
        OpCase {
            name: "attention_composite",
            shapes: [
                &[&[3, 4], &[5, 4], &[5, 4]],
                &[&[2, 2], &[3, 2], &[3, 2]],
                &[&[4, 3], &[2, 3], &[2, 3]],
            ],
            positive: &[false, false, false],
            build: |t, x| {
                let scores = t.matmul_nt(&x[0], &x[1])?;
                let k = x[0].shape()[1] as f64;
                let scaled = t.scale(&scores, 1.0 / k.sqrt())?;
                let attn = t.softmax_rows(&scaled)?;
                let y = t.matmul(&attn, &x[2])?;
                probe_loss(t, &y)
            },
        },
        OpCase {
            name: "alignment_composite",
            shapes: [
                &[&[3, 4], &[3, 4]],
                &[&[2, 5], &[2, 5]],
                &[&[4, 2], &[4, 2]],
            ],
            positive: &[false, false],
            build: |t, x| {
                let mf = t.mean_all(&x[0])?;
                let sf = t.std_all(&x[0], 1e-5)?;
                let mi = t.mean_all(&x[1])?;
                let si = t.std_all(&x[1], 1e-5)?;
                let centered = t.sub(&x[0], &mf)?;
                let standardized = t.div(&centered, &sf)?;
                let rescaled = t.mul(&standardized, &si)?;
                let aligned = t.add(&rescaled, &mi)?;
                let unit = t.normalize(&aligned, 1e-8)?;
                probe_loss(t, &unit)
            },
        },
    ]
}

/// Values in `+-[0.25, 1.0)` (or `[0.5, 1.5)` when positivity is required):
/// bounded away from the relu/abs kink and from zero denominators.
fn gen_input(rng: &mut SeededRng, shape: &[usize], positive: bool) -> NdTensor {
    NdTensor::from_fn(shape, |_| {
        if positive {
            rng.uniform(0.5, 1.5)
        } else {
            let mag = rng.uniform(0.25, 1.0);
            if rng.next_u64() % 2 == 0 {
                mag
            } else {
                -mag
            }
        }
    })
}

fn eval_loss(case: &OpCase, inputs: &[NdTensor]) -> Result<f64> {
    let mut tape = GradTape::new();
    let params: Vec<NdTensor> = inputs.iter().map(|t| tape.param(t)).collect();
    let loss = (case.build)(&mut tape, &params)?;
    loss.scalar_value()
}

/// Run the full op-gradient comparison and return one worst-case report per
/// op. Callers assert on `max_rel_err`.
pub fn op_gradient_reports(seed: u64) -> Result<Vec<FdReport>> {
    let mut reports = Vec::new();
    for (ci, case) in cases().iter().enumerate() {
        let mut worst = 0.0f64;
        for round in 0..3usize {
            let mut rng = SeededRng::new(seed).fork2(ci as u64, round as u64);
            let inputs: Vec<NdTensor> = case.shapes[round]
                .iter()
                .enumerate()
                .map(|(i, s)| gen_input(&mut rng, s, case.positive[i]))
                .collect();

            let mut tape = GradTape::new();
            let params: Vec<NdTensor> = inputs.iter().map(|t| tape.param(t)).collect();
            let loss = (case.build)(&mut tape, &params)?;
            let grads = tape.backprop(&loss)?;

            for (ii, input) in inputs.iter().enumerate() {
                let analytic = grads
                    .get(&params[ii])
                    .map(|g| g.data().to_vec())
                    .unwrap_or_else(|| vec![0.0; input.numel()]);
                for j in 0..input.numel() {
                    let x = input.data()[j];
                    let h = 1e-6 * x.abs().max(1.0);
                    let mut bumped = inputs.to_vec();
                    bumped[ii].data_mut()[j] = x + h;
                    let fp = eval_loss(case, &bumped)?;
                    bumped[ii].data_mut()[j] = x - h;
                    let fm = eval_loss(case, &bumped)?;
                    let fd = (fp - fm) / (2.0 * h);
                    let a = analytic[j];
                    let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
                    if rel > worst {
                        worst = rel;
                    }
                }
            }
        }
        reports.push(FdReport {
            op: case.name.to_string(),
            max_rel_err: worst,
        });
    }
    Ok(reports)
}
