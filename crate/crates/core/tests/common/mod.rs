//! Finite-difference gradient suite shared by the gradient and acceptance tests.

#![allow(dead_code)]

use facerel::diff::gradcheck::{check_inputs, max_relative_error, Probe, DEFAULT_STEP};
use facerel::diff::{ParamStore, Tape, Tensor, Var};
use facerel::frequency::{frequency_cue, FilterSpec};
use facerel::mpsm::{fuse_multiscale, partition, similarity_pattern};
use facerel::net::{batch_tensor, ModelConfig, TwoStreamNet, Variant};
use facerel::nn::Mode;
use facerel::objective::{loss_ce, loss_seg, loss_sim, loss_total, LossWeights};
use facerel::supervision::{patch_probabilities_for, target_similarity, ManipulationMask};
use facerel::{Image, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOLERANCE: f64 = 1e-4;

pub struct OpCheck {
    pub name: String,
    pub probes: Vec<Probe>,
}

impl OpCheck {
    pub fn max_error(&self) -> f64 {
        max_relative_error(&self.probes)
    }

    pub fn passed(&self, min_probes: usize) -> bool {
        self.probes.len() >= min_probes && self.max_error() < TOLERANCE
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values with magnitude in `[0.1, 1)` and random sign, clear of kinks at 0.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v = rng.random_range(0.1..1.0);
        if rng.random::<bool>() {
            v
        } else {
            -v
        }
    })
}

/// `sum(y * r)` for a fixed random `r`, so every output element gets its own
/// upstream gradient.
fn readout(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = uniform(&mut rng, tape.shape(y), -1.0, 1.0);
    let r = tape.constant(r);
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

fn case(name: &str, inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> (String, Vec<Tensor>, Build) {
    (name.to_string(), inputs, Box::new(f))
}

/// One check per differentiable operation, each with `probes` probes per input.
pub fn op_checks(probes: usize, seed: u64) -> Vec<OpCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut cases = vec![
        case(
            "conv2d small channels",
            vec![uniform(r, &[2, 6, 5, 3], -1.0, 1.0), uniform(r, &[3, 3, 3, 4], -0.5, 0.5), uniform(r, &[4], -0.5, 0.5)],
            |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
                readout(t, y, 1)
            },
        ),
        case(
            "conv2d wide channels",
            vec![uniform(r, &[2, 7, 5, 8], -1.0, 1.0), uniform(r, &[3, 3, 8, 5], -0.5, 0.5), uniform(r, &[5], -0.5, 0.5)],
            |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
                readout(t, y, 2)
            },
        ),
        case(
            "conv2d wide channels, banded",
            vec![uniform(r, &[1, 70, 30, 16], -1.0, 1.0), uniform(r, &[3, 3, 16, 2], -0.5, 0.5)],
            |t, v| {
                let y = t.conv2d(v[0], v[1], None, 1, 1)?;
                readout(t, y, 3)
            },
        ),
        case(
            "conv2d small channels, tiled",
            vec![uniform(r, &[1, 40, 40, 3], -1.0, 1.0), uniform(r, &[3, 3, 3, 2], -0.5, 0.5)],
            |t, v| {
                let y = t.conv2d(v[0], v[1], None, 1, 1)?;
                readout(t, y, 4)
            },
        ),
        case(
            "conv2d stride 2",
            vec![uniform(r, &[2, 7, 7, 3], -1.0, 1.0), uniform(r, &[3, 3, 3, 2], -0.5, 0.5)],
            |t, v| {
                let y = t.conv2d(v[0], v[1], None, 2, 1)?;
                readout(t, y, 5)
            },
        ),
        case(
            "conv2d pointwise",
            vec![uniform(r, &[2, 4, 4, 5], -1.0, 1.0), uniform(r, &[1, 1, 5, 3], -0.5, 0.5), uniform(r, &[3], -0.5, 0.5)],
            |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 0)?;
                readout(t, y, 6)
            },
        ),
        case(
            "batchnorm train",
            vec![uniform(r, &[2, 3, 3, 4], -2.0, 2.0), uniform(r, &[4], 0.5, 1.5), uniform(r, &[4], -0.5, 0.5)],
            |t, v| {
                let (y, _, _) = t.batchnorm_train(v[0], v[1], v[2], 1e-5)?;
                readout(t, y, 7)
            },
        ),
        case(
            "batchnorm eval",
            vec![uniform(r, &[2, 3, 3, 4], -2.0, 2.0), uniform(r, &[4], 0.5, 1.5), uniform(r, &[4], -0.5, 0.5)],
            |t, v| {
                let y = t.batchnorm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.0, 0.3], &[1.0, 0.5, 2.0, 0.8], 1e-5)?;
                readout(t, y, 8)
            },
        ),
        case("relu", vec![away_from_zero(r, &[3, 10])], |t, v| {
            let y = t.relu(v[0]);
            readout(t, y, 9)
        }),
        case("relu, replayed gates", vec![uniform(r, &[3, 10], -1.0, 1.0)], |t, v| {
            t.replay_relu_gates(vec![(0..30).map(|i| i % 3 != 0).collect()]);
            let y = t.relu(v[0]);
            readout(t, y, 37)
        }),
        case("sigmoid", vec![uniform(r, &[3, 10], -4.0, 4.0)], |t, v| {
            let y = t.sigmoid(v[0]);
            readout(t, y, 10)
        }),
        case("ln", vec![uniform(r, &[3, 10], 0.2, 3.0)], |t, v| {
            let y = t.ln(v[0]);
            readout(t, y, 11)
        }),
        case("sqrt", vec![uniform(r, &[3, 10], 0.2, 3.0)], |t, v| {
            let y = t.sqrt(v[0], 1e-8);
            readout(t, y, 12)
        }),
        case("clamp", vec![uniform(r, &[4, 10], -1.0, 1.0)], |t, v| {
            // keep inputs clear of the bounds by the probe step
            let y = t.clamp(v[0], -0.6, 0.6);
            readout(t, y, 13)
        }),
        case("affine", vec![uniform(r, &[3, 10], -1.0, 1.0)], |t, v| {
            let y = t.affine(v[0], -1.7, 0.3);
            readout(t, y, 14)
        }),
        case(
            "add",
            vec![uniform(r, &[3, 8], -1.0, 1.0), uniform(r, &[3, 8], -1.0, 1.0)],
            |t, v| {
                let y = t.add(v[0], v[1])?;
                readout(t, y, 15)
            },
        ),
        case(
            "sub",
            vec![uniform(r, &[3, 8], -1.0, 1.0), uniform(r, &[3, 8], -1.0, 1.0)],
            |t, v| {
                let y = t.sub(v[0], v[1])?;
                readout(t, y, 16)
            },
        ),
        case(
            "mul",
            vec![uniform(r, &[3, 8], -1.0, 1.0), uniform(r, &[3, 8], -1.0, 1.0)],
            |t, v| {
                let y = t.mul(v[0], v[1])?;
                readout(t, y, 17)
            },
        ),
        case(
            "mul broadcast",
            vec![uniform(r, &[2, 3, 3, 4], -1.0, 1.0), uniform(r, &[2, 3, 3, 1], -1.0, 1.0)],
            |t, v| {
                let y = t.mul(v[1], v[0])?;
                readout(t, y, 18)
            },
        ),
        case(
            "concat",
            vec![uniform(r, &[2, 3, 3, 2], -1.0, 1.0), uniform(r, &[2, 3, 3, 3], -1.0, 1.0)],
            |t, v| {
                let y = t.concat(&[v[0], v[1], v[0]])?;
                readout(t, y, 19)
            },
        ),
        case("slice_last", vec![uniform(r, &[2, 3, 3, 5], -1.0, 1.0)], |t, v| {
            let y = t.slice_last(v[0], 1, 3)?;
            readout(t, y, 20)
        }),
        case("split", vec![uniform(r, &[2, 3, 3, 5], -1.0, 1.0)], |t, v| {
            let parts = t.split(v[0], &[2, 3])?;
            let a = readout(t, parts[0], 21)?;
            let b = readout(t, parts[1], 22)?;
            let b = t.affine(b, 2.0, 0.0);
            t.add(a, b)
        }),
        case("reshape", vec![uniform(r, &[2, 3, 4], -1.0, 1.0)], |t, v| {
            let y = t.reshape(v[0], &[4, 6])?;
            readout(t, y, 23)
        }),
        case("flatten", vec![uniform(r, &[2, 3, 3, 2], -1.0, 1.0)], |t, v| {
            let y = t.flatten(v[0])?;
            readout(t, y, 24)
        }),
        case(
            "dense",
            vec![uniform(r, &[3, 7], -1.0, 1.0), uniform(r, &[7, 4], -0.5, 0.5), uniform(r, &[4], -0.5, 0.5)],
            |t, v| {
                let y = t.dense(v[0], v[1], Some(v[2]))?;
                readout(t, y, 25)
            },
        ),
        case("resize_bilinear up", vec![uniform(r, &[2, 3, 4, 2], -1.0, 1.0)], |t, v| {
            let y = t.resize_bilinear(v[0], 7, 9)?;
            readout(t, y, 26)
        }),
        case("resize_bilinear down", vec![uniform(r, &[1, 8, 6, 2], -1.0, 1.0)], |t, v| {
            let y = t.resize_bilinear(v[0], 3, 4)?;
            readout(t, y, 27)
        }),
        case("avg_pool2", vec![uniform(r, &[2, 5, 6, 3], -1.0, 1.0)], |t, v| {
            let y = t.avg_pool2(v[0])?;
            readout(t, y, 28)
        }),
        case("global_pool", vec![uniform(r, &[2, 3, 4, 3], -1.0, 1.0)], |t, v| {
            let y = t.global_pool(v[0])?;
            readout(t, y, 29)
        }),
        case("gather", vec![uniform(r, &[4, 6], -1.0, 1.0)], |t, v| {
            // repeated indices accumulate, element 0 is never read
            let index = (0..30).map(|i| (i * 7) % 23 + 1).collect();
            let y = t.gather(v[0], index, &[5, 6])?;
            readout(t, y, 30)
        }),
        case("l2_normalize", vec![uniform(r, &[2, 4, 6], -1.0, 1.0)], |t, v| {
            let y = t.l2_normalize(v[0], 1e-8)?;
            readout(t, y, 31)
        }),
        case("gram", vec![uniform(r, &[2, 4, 5], -1.0, 1.0)], |t, v| {
            let y = t.gram(v[0])?;
            readout(t, y, 32)
        }),
        case("sum_trailing", vec![uniform(r, &[2, 3, 4], -1.0, 1.0)], |t, v| {
            let y = t.sum_trailing(v[0], 1)?;
            readout(t, y, 33)
        }),
        case("mean", vec![uniform(r, &[4, 6], -1.0, 1.0)], |t, v| {
            let y = t.mean(v[0]);
            let y2 = t.mul(y, y)?;
            Ok(t.sum(y2))
        }),
        case(
            "fuse_multiscale",
            vec![uniform(r, &[1, 8, 8, 2], -1.0, 1.0), uniform(r, &[1, 4, 4, 2], -1.0, 1.0), uniform(r, &[1, 2, 2, 3], -1.0, 1.0)],
            |t, v| {
                let y = fuse_multiscale(t, v[0], v[1], v[2])?;
                readout(t, y, 34)
            },
        ),
        case("partition", vec![uniform(r, &[2, 5, 7, 2], -1.0, 1.0)], |t, v| {
            let y = partition(t, v[0], 3)?;
            readout(t, y, 35)
        }),
        case("similarity_pattern", vec![uniform(r, &[2, 9, 6], -1.0, 1.0)], |t, v| {
            let y = similarity_pattern(t, v[0])?;
            readout(t, y, 36)
        }),
    ];

    let labels = Tensor::from_fn(&[24, 1], |i| (i % 3 == 1) as u8 as f64);
    let mask = Tensor::from_fn(&[2, 4, 4, 1], |i| ((i * 7) % 3 == 0) as u8 as f64);
    let target = Tensor::from_fn(&[2, 4, 4], |i| 1.0 - ((i % 5) as f64 / 5.0).powi(2));
    let target2 = target.clone();
    let mask2 = mask.clone();
    let labels2 = labels.clone();
    cases.push(case("loss_ce", vec![uniform(r, &[24, 1], 0.05, 0.95)], move |t, v| loss_ce(t, v[0], &labels)));
    cases.push(case("loss_seg", vec![uniform(r, &[2, 4, 4, 1], 0.05, 0.95)], move |t, v| {
        loss_seg(t, v[0], &mask, true)
    }));
    cases.push(case("loss_sim", vec![uniform(r, &[2, 4, 4], 0.0, 1.0)], move |t, v| loss_sim(t, v[0], &target)));
    cases.push(case(
        "loss_total",
        vec![uniform(r, &[24, 1], 0.05, 0.95), uniform(r, &[2, 4, 4], 0.0, 1.0), uniform(r, &[2, 4, 4, 1], 0.05, 0.95)],
        move |t, v| {
            let ce = loss_ce(t, v[0], &labels2)?;
            let sim = loss_sim(t, v[1], &target2)?;
            let seg = loss_seg(t, v[2], &mask2, false)?;
            loss_total(t, ce, Some(sim), Some(seg), LossWeights::default())
        },
    ));

    cases
        .into_iter()
        .map(|(name, inputs, f)| {
            let probes = check_inputs(&inputs, |t, v| f(t, v), probes, DEFAULT_STEP, r).expect(&name);
            OpCheck { name, probes }
        })
        .collect()
}

/// Setup for the whole-network check: 2-sample batch of 32x32 inputs.
pub struct NetworkCase {
    pub net: TwoStreamNet,
    pub store: ParamStore,
    pub x1: Tensor,
    pub x2: Tensor,
    pub labels: Tensor,
    pub mask: Tensor,
    pub target: Tensor,
}

pub fn network_case(seed: u64) -> NetworkCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = ModelConfig {
        image_size: 32,
        k: 3,
        variant: Variant::Full,
        ..ModelConfig::default()
    };
    let mut store = ParamStore::new();
    let net = TwoStreamNet::new(config, &mut store, &mut rng).unwrap();
    let images: Vec<Image> = (0..2)
        .map(|_| Image::from_fn(32, 32, 3, |_, _, _| rng.random::<f64>()).unwrap())
        .collect();
    let cues: Vec<Image> = images.iter().map(|i| frequency_cue(i, FilterSpec::default()).unwrap()).collect();
    let masks: Vec<ManipulationMask> = (0..2)
        .map(|b| ManipulationMask::new(32, 32, (0..32 * 32).map(|i| (b == 1 && (i / 32) > 10 && (i % 32) < 20) as u8).collect()).unwrap())
        .collect();
    let e = config.high_extent();
    let target: Vec<f64> = masks
        .iter()
        .flat_map(|m| target_similarity(&patch_probabilities_for(m, 3, e, e).unwrap()).data().to_vec())
        .collect();
    NetworkCase {
        x1: batch_tensor(&images.iter().collect::<Vec<_>>()).unwrap(),
        x2: batch_tensor(&cues.iter().collect::<Vec<_>>()).unwrap(),
        labels: Tensor::new(&[2, 1], vec![0.0, 1.0]).unwrap(),
        mask: Tensor::new(&[2, 32, 32, 1], masks.iter().flat_map(|m| m.to_f64()).collect()).unwrap(),
        target: Tensor::new(&[2, 9, 9], target).unwrap(),
        net,
        store,
    }
}

impl NetworkCase {
    /// Training-mode total loss with default weights.
    pub fn loss(&self, tape: &mut Tape, store: &ParamStore) -> Result<Var> {
        let a = tape.constant(self.x1.clone());
        let b = tape.constant(self.x2.clone());
        let out = self.net.forward(tape, store, a, b, Mode::Train)?;
        let ce = loss_ce(tape, out.y_hat, &self.labels)?;
        let sim = loss_sim(tape, out.s_hat.expect("full model"), &self.target)?;
        let seg = loss_seg(tape, out.mask_hat, &self.mask, true)?;
        loss_total(tape, ce, Some(sim), Some(seg), LossWeights::default())
    }
}

/// Central differences at `DEFAULT_STEP` for `probes_per_tensor` positions of
/// every trainable tensor. The network has far too many ReLUs for a step of
/// that size to stay on one linear piece, so every evaluation replays the
/// switching pattern of the unperturbed pass: the loss is then smooth around
/// the probed point and its gradient there is unchanged.
pub fn network_check(probes_per_tensor: usize, seed: u64) -> OpCheck {
    let case = network_case(seed);
    let mut tape = Tape::new();
    tape.record_relu_gates();
    let loss = case.loss(&mut tape, &case.store).unwrap();
    let gates = tape.take_relu_gates();
    let grads = tape.backward(loss).unwrap();
    let eval = |s: &ParamStore| {
        let mut tape = Tape::new();
        tape.replay_relu_gates(gates.clone());
        let loss = case.loss(&mut tape, s).unwrap();
        tape.value(loss).item()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut work = case.store.clone();
    let mut probes = Vec::new();
    for id in case.store.trainable_ids() {
        let numel = case.store.value(id).numel();
        let analytic = grads.param(id).expect("every parameter reaches the loss");
        for pos in rand::seq::index::sample(&mut rng, numel, numel.min(probes_per_tensor)) {
            let orig = case.store.value(id).data()[pos];
            work.value_mut(id).data_mut()[pos] = orig + DEFAULT_STEP;
            let up = eval(&work);
            work.value_mut(id).data_mut()[pos] = orig - DEFAULT_STEP;
            let down = eval(&work);
            work.value_mut(id).data_mut()[pos] = orig;
            probes.push(Probe {
                target: case.store.name(id).to_string(),
                position: pos,
                analytic: analytic.data()[pos],
                numeric: (up - down) / (2.0 * DEFAULT_STEP),
            });
        }
    }
    OpCheck {
        name: "network total loss".into(),
        probes,
    }
}
