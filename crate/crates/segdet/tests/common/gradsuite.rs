//! Randomized finite-difference verification of every differentiable
//! operation, shared between the focused gradient tests and the
//! acceptance suite.
//!
//! For each operation we draw small random instances, build the loss
//! `sum(w ∘ op(inputs))` with a fixed random weighting `w` (so upstream
//! gradients are non-trivial), compute analytic gradients through the
//! tape, and compare against central finite differences evaluated by
//! re-running the forward closure. Inputs are sampled away from kinks
//! (relu) and singularities (div, log).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segdet::gradcheck::{finite_difference_gradient, max_relative_error, DEFAULT_STEP};
use segdet::tensor::{Mode, RunningStats, Tape, Tensor};

pub const TOLERANCE: f64 = 1e-4;
pub const INSTANCES_PER_OP: usize = 20;

/// Worst relative error seen for one named operation.
pub struct OpReport {
    pub name: &'static str,
    pub instances: usize,
    pub worst_error: f64,
}

type Inputs = Vec<(Vec<usize>, Vec<f64>)>;
type Sampler = dyn Fn(&mut ChaCha8Rng) -> Inputs;
type Forward = dyn Fn(&Tape, &[Tensor]) -> Tensor;

fn rand_data(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Sample data in [lo, hi] excluding a band of `margin` around zero, for
/// operations with a kink or pole at the origin.
fn rand_data_away_from_zero(rng: &mut ChaCha8Rng, n: usize, hi: f64, margin: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mag = rng.gen_range(margin..hi);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

/// Check one op over `INSTANCES_PER_OP` random instances: analytic tape
/// gradients vs finite differences for the first `differentiable` input
/// slots (trailing slots carry op parameters like strides, which the tape
/// rightly ignores but finite differences may genuinely feel).
fn check_op(name: &'static str, seed: u64, differentiable: usize, sample: &Sampler, forward: &Forward) -> OpReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for instance in 0..INSTANCES_PER_OP {
        let inputs = sample(&mut rng);

        // Probe the output shape once to draw the loss weighting.
        let probe_tensors: Vec<Tensor> = inputs
            .iter()
            .map(|(shape, data)| Tensor::from_vec(shape, data.clone()).unwrap())
            .collect();
        let probe_tape = Tape::inference();
        let out = forward(&probe_tape, &probe_tensors);
        let weights = rand_data(&mut rng, out.numel(), -1.0, 1.0);
        let w_shape = out.shape().to_vec();

        // Analytic gradients: all inputs as trainable leaves, one sweep.
        let params: Vec<Tensor> = inputs
            .iter()
            .map(|(shape, data)| Tensor::param(shape, data.clone()).unwrap())
            .collect();
        let tape = Tape::new();
        let w = Tensor::from_vec(&w_shape, weights.clone()).unwrap();
        let loss = tape.sum_all(&tape.mul(&forward(&tape, &params), &w).unwrap());
        tape.backward(&loss).unwrap();

        for slot in 0..differentiable.min(inputs.len()) {
            let analytic = params[slot].grad().unwrap();
            let mut eval = |probe: &[f64]| -> f64 {
                let tensors: Vec<Tensor> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, (shape, data))| {
                        let buf = if j == slot { probe.to_vec() } else { data.clone() };
                        Tensor::from_vec(shape, buf).unwrap()
                    })
                    .collect();
                let t = Tape::inference();
                let w = Tensor::from_vec(&w_shape, weights.clone()).unwrap();
                t.sum_all(&t.mul(&forward(&t, &tensors), &w).unwrap()).item()
            };
            let numeric = finite_difference_gradient(&mut eval, &inputs[slot].1, DEFAULT_STEP);
            let err = max_relative_error(&analytic, &numeric);
            assert!(
                err < TOLERANCE,
                "{name} instance {instance} input {slot}: relative error {err:.3e} >= {TOLERANCE:.1e}"
            );
            worst = worst.max(err);
        }
    }
    OpReport { name, instances: INSTANCES_PER_OP, worst_error: worst }
}

fn pair_sampler(lo: f64, hi: f64) -> impl Fn(&mut ChaCha8Rng) -> Inputs {
    move |rng| {
        let shape = vec![rng.gen_range(1..=3), rng.gen_range(1..=4)];
        let n: usize = shape.iter().product();
        vec![
            (shape.clone(), rand_data(rng, n, lo, hi)),
            (shape, rand_data(rng, n, lo, hi)),
        ]
    }
}

/// Run the whole suite. Panics (with the failing op named) on any
/// violation; returns per-op worst errors for reporting.
pub fn run_tensor_op_suite() -> Vec<OpReport> {
    let mut reports = Vec::new();

    reports.push(check_op("add", 101, 2, &pair_sampler(-2.0, 2.0), &|t, x| {
        t.add(&x[0], &x[1]).unwrap()
    }));
    reports.push(check_op("sub", 102, 2, &pair_sampler(-2.0, 2.0), &|t, x| {
        t.sub(&x[0], &x[1]).unwrap()
    }));
    reports.push(check_op("mul", 103, 2, &pair_sampler(-2.0, 2.0), &|t, x| {
        t.mul(&x[0], &x[1]).unwrap()
    }));
    reports.push(check_op(
        "div",
        104,
        2,
        &|rng| {
            let shape = vec![rng.gen_range(1..=3), rng.gen_range(1..=4)];
            let n: usize = shape.iter().product();
            vec![
                (shape.clone(), rand_data(rng, n, -2.0, 2.0)),
                // Denominators well away from zero so the FD probe (±1e-5)
                // cannot cross the pole.
                (shape, rand_data_away_from_zero(rng, n, 2.0, 0.4)),
            ]
        },
        &|t, x| t.div(&x[0], &x[1]).unwrap(),
    ));

    let unary_sampler = |lo: f64, hi: f64| {
        move |rng: &mut ChaCha8Rng| {
            let shape = vec![rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=4)];
            let n: usize = shape.iter().product();
            vec![(shape, rand_data(rng, n, lo, hi))]
        }
    };
    reports.push(check_op("add_scalar", 105, 1, &unary_sampler(-2.0, 2.0), &|t, x| {
        t.add_scalar(&x[0], 0.7)
    }));
    reports.push(check_op("mul_scalar", 106, 1, &unary_sampler(-2.0, 2.0), &|t, x| {
        t.mul_scalar(&x[0], -1.3)
    }));
    reports.push(check_op(
        "relu",
        107,
        1,
        &|rng| {
            let shape = vec![rng.gen_range(1..=3), rng.gen_range(1..=5)];
            let n: usize = shape.iter().product();
            // Keep inputs clear of the kink at zero by more than the FD step.
            vec![(shape, rand_data_away_from_zero(rng, n, 2.0, 0.05))]
        },
        &|t, x| t.relu(&x[0]),
    ));
    reports.push(check_op("sigmoid", 108, 1, &unary_sampler(-3.0, 3.0), &|t, x| {
        t.sigmoid(&x[0])
    }));
    reports.push(check_op("exp", 109, 1, &unary_sampler(-2.0, 1.5), &|t, x| t.exp(&x[0])));
    reports.push(check_op("log", 110, 1, &unary_sampler(0.2, 3.0), &|t, x| t.log(&x[0])));

    reports.push(check_op("sum_all", 111, 1, &unary_sampler(-2.0, 2.0), &|t, x| {
        t.sum_all(&x[0])
    }));
    reports.push(check_op("mean_all", 112, 1, &unary_sampler(-2.0, 2.0), &|t, x| {
        t.mean_all(&x[0])
    }));
    reports.push(check_op(
        "sum_axis",
        113,
        1,
        &|rng| {
            let shape = vec![rng.gen_range(2..=3), rng.gen_range(2..=3), rng.gen_range(2..=4)];
            let n: usize = shape.iter().product();
            let axis = rng.gen_range(0..3) as f64;
            vec![(shape, rand_data(rng, n, -2.0, 2.0)), (vec![1], vec![axis])]
        },
        &|t, x| {
            let axis = x[1].item().round() as usize;
            t.sum_axis(&x[0], axis).unwrap()
        },
    ));

    reports.push(check_op(
        "concat",
        114,
        2,
        &|rng| {
            let c1 = rng.gen_range(1..=3);
            let c2 = rng.gen_range(1..=3);
            let h = rng.gen_range(1..=3);
            vec![
                (vec![2, c1, h], rand_data(rng, 2 * c1 * h, -2.0, 2.0)),
                (vec![2, c2, h], rand_data(rng, 2 * c2 * h, -2.0, 2.0)),
            ]
        },
        &|t, x| t.concat(&[&x[0], &x[1]], 1).unwrap(),
    ));
    reports.push(check_op(
        "slice",
        115,
        1,
        &|rng| {
            let c = rng.gen_range(2..=5);
            vec![(vec![2, c, 3], rand_data(rng, 6 * c, -2.0, 2.0))]
        },
        &|t, x| {
            let c = x[0].shape()[1];
            t.slice(&x[0], 1, 1, c - 1).unwrap()
        },
    ));
    reports.push(check_op(
        "reshape",
        116,
        1,
        &|rng| vec![(vec![2, 3, 4], rand_data(rng, 24, -2.0, 2.0))],
        &|t, x| t.reshape(&x[0], &[4, 6]).unwrap(),
    ));
    reports.push(check_op(
        "permute",
        117,
        1,
        &|rng| vec![(vec![2, 3, 4], rand_data(rng, 24, -2.0, 2.0))],
        &|t, x| t.permute(&x[0], &[2, 0, 1]).unwrap(),
    ));

    reports.push(check_op(
        "conv2d",
        118,
        3,
        &|rng| {
            let (b, ci, co) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=3));
            let k = rng.gen_range(1..=3);
            let h = rng.gen_range(k..=6);
            let w = rng.gen_range(k..=6);
            let stride = rng.gen_range(1..=2) as f64;
            let padding = rng.gen_range(0..=1) as f64;
            vec![
                (vec![b, ci, h, w], rand_data(rng, b * ci * h * w, -1.5, 1.5)),
                (vec![co, ci, k, k], rand_data(rng, co * ci * k * k, -1.0, 1.0)),
                (vec![co], rand_data(rng, co, -0.5, 0.5)),
                (vec![2], vec![stride, padding]),
            ]
        },
        &|t, x| {
            let sp = x[3].to_vec();
            t.conv2d(&x[0], &x[1], &x[2], sp[0].round() as usize, sp[1].round() as usize).unwrap()
        },
    ));
    reports.push(check_op(
        "conv2d_transpose",
        119,
        2,
        &|rng| {
            let (b, ci, co) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=2));
            let pick = rng.gen_range(0..3);
            // (k, stride, padding) combinations that keep output extents
            // positive, including the decoder's k=2/s=2 shape.
            let (k, stride, padding) = [(2, 2, 0), (3, 1, 1), (3, 2, 0)][pick];
            let h = rng.gen_range(2..=4);
            let w = rng.gen_range(2..=4);
            vec![
                (vec![b, ci, h, w], rand_data(rng, b * ci * h * w, -1.5, 1.5)),
                (vec![ci, co, k, k], rand_data(rng, ci * co * k * k, -1.0, 1.0)),
                (vec![3], vec![k as f64, stride as f64, padding as f64]),
            ]
        },
        &|t, x| {
            let ksp = x[2].to_vec();
            t.conv2d_transpose(&x[0], &x[1], ksp[1].round() as usize, ksp[2].round() as usize).unwrap()
        },
    ));

    reports.push(check_op(
        "batch_norm_train",
        120,
        3,
        &|rng| {
            let (b, c) = (rng.gen_range(1..=2), rng.gen_range(1..=3));
            let (h, w) = (rng.gen_range(2..=3), rng.gen_range(2..=3));
            vec![
                (vec![b, c, h, w], rand_data(rng, b * c * h * w, -2.0, 2.0)),
                (vec![c], rand_data(rng, c, 0.5, 1.5)),
                (vec![c], rand_data(rng, c, -0.5, 0.5)),
            ]
        },
        &|t, x| {
            let c = x[0].shape()[1];
            let mut stats = RunningStats::new(c);
            t.batch_norm(&x[0], &x[1], &x[2], &mut stats, Mode::Train).unwrap()
        },
    ));
    reports.push(check_op(
        "batch_norm_infer",
        121,
        3,
        &|rng| {
            let (b, c) = (rng.gen_range(1..=2), rng.gen_range(1..=3));
            let (h, w) = (rng.gen_range(1..=3), rng.gen_range(2..=3));
            let mut frozen = rand_data(rng, 2 * c, 0.3, 2.0);
            for v in frozen.iter_mut().take(c) {
                *v -= 1.0; // means may be negative
            }
            vec![
                (vec![b, c, h, w], rand_data(rng, b * c * h * w, -2.0, 2.0)),
                (vec![c], rand_data(rng, c, 0.5, 1.5)),
                (vec![c], rand_data(rng, c, -0.5, 0.5)),
                (vec![2 * c], frozen),
            ]
        },
        &|t, x| {
            let c = x[0].shape()[1];
            let frozen = x[3].to_vec();
            let mut stats = RunningStats::new(c);
            stats.mean.copy_from_slice(&frozen[..c]);
            stats.var.copy_from_slice(&frozen[c..]);
            t.batch_norm(&x[0], &x[1], &x[2], &mut stats, Mode::Infer).unwrap()
        },
    ));

    reports.push(check_op(
        "spatial_downsample",
        122,
        1,
        &|rng| {
            let f = rng.gen_range(1..=3);
            let (th, tw) = (rng.gen_range(1..=2), rng.gen_range(1..=2));
            let (b, c) = (rng.gen_range(1..=2), rng.gen_range(1..=2));
            let (h, w) = (th * f, tw * f);
            vec![
                (vec![b, c, h, w], rand_data(rng, b * c * h * w, -2.0, 2.0)),
                (vec![2], vec![th as f64, tw as f64]),
            ]
        },
        &|t, x| {
            let tgt = x[1].to_vec();
            t.spatial_downsample(&x[0], tgt[0].round() as usize, tgt[1].round() as usize).unwrap()
        },
    ));

    reports
}

/// Finite-difference checks for the two training losses: the soft-overlap
/// mask loss (w.r.t. the predicted mask) and the four-term detection loss
/// (w.r.t. the raw prediction tensor).
pub fn run_loss_suite() -> Vec<OpReport> {
    use segdet::dethead::{det_loss, AnchorGrid, DetLossWeights, DetectionTarget, GtBox, RawPrediction};
    use segdet::segnet::seg_loss;

    let mut reports = Vec::new();

    reports.push(check_op(
        "seg_loss",
        301,
        1,
        &|rng| {
            let b = rng.gen_range(1..=2);
            let (h, w) = (rng.gen_range(2..=4), rng.gen_range(2..=4));
            let per = h * w;
            // Predictions clear of the [0,1] bounds so the probe stays valid;
            // targets binary with at least one positive pixel per image.
            let pred = rand_data(rng, b * per, 0.05, 0.95);
            let mut target = vec![0.0; b * per];
            for img in 0..b {
                for p in 0..per {
                    target[img * per + p] = if rng.gen_bool(0.35) { 1.0 } else { 0.0 };
                }
                let pinned = rng.gen_range(0..per);
                target[img * per + pinned] = 1.0;
            }
            vec![(vec![b, 1, h, w], pred), (vec![b, 1, h, w], target)]
        },
        &|t, x| seg_loss(t, &x[0], &x[1]).unwrap(),
    ));

    reports.push(check_op(
        "det_loss",
        302,
        1,
        &|rng| {
            // Grid: S=2, A=2, C=2 over a 16px image (8px cells). One ground
            // truth box in image 0 of a batch of 2, centered away from cell
            // edges so its raw-space preimage is smooth.
            let rec = 7;
            let raw = rand_data(rng, 2 * 2 * 2 * 2 * rec, -2.0, 2.0);
            let cell_x = rng.gen_range(0..2) as f64;
            let cell_y = rng.gen_range(0..2) as f64;
            let gt = vec![
                (cell_x + rng.gen_range(0.1..0.9)) * 8.0,
                (cell_y + rng.gen_range(0.1..0.9)) * 8.0,
                rng.gen_range(4.0..14.0),
                rng.gen_range(4.0..14.0),
                rng.gen_range(0..2) as f64,
            ];
            vec![(vec![2, 2, 2, 2, rec], raw), (vec![5], gt)]
        },
        &|t, x| {
            let grid = AnchorGrid::new(2, 2, vec![(1.0, 1.0), (0.5, 2.0)]).unwrap();
            let gt = x[1].to_vec();
            let boxed = GtBox {
                class: gt[4].round() as usize,
                cx: gt[0],
                cy: gt[1],
                w: gt[2],
                h: gt[3],
            };
            let targets = vec![
                grid.assign_targets(&[boxed], 16).unwrap(),
                DetectionTarget::default(),
            ];
            let raw = RawPrediction { y: x[0].clone() };
            det_loss(t, &grid, &raw, &targets, &DetLossWeights::default())
                .unwrap()
                .0
        },
    ));

    reports
}
