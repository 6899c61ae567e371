//! Finite-difference suites over every differentiable op and every full model.

use mujo::baselines::{ntxent_loss, Decoder, SimclrHead, TaskHead};
use mujo::corpus::Modality;
use mujo::finetune::{class_weights, weighted_ce};
use mujo::models::{ClassifierHead, ModalityModel, REP_DIM};
use mujo::pretrain::{info_nce, total_loss};
use mujo::tensor::gradcheck::{check_with_step, probe, random_tensor, STEP};
use mujo::tensor::{Graph, Padding, ParamStore, Reduction, Tensor, Var};
use mujo::Result;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const POINTS: usize = 20;
pub const TOL: f64 = 1e-4;
/// Step for whole towers, small enough to stay clear of pooling and ReLU kinks.
pub const MODEL_STEP: f64 = 1e-6;

pub struct Outcome {
    pub name: String,
    pub points: usize,
    pub max_rel_err: f64,
    pub detail: String,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.points == POINTS && self.max_rel_err < TOL
    }
}

pub struct Suite {
    pub step: f64,
    pub outcomes: Vec<Outcome>,
}

impl Suite {
    pub fn new(step: f64) -> Self {
        Self { step, outcomes: Vec::new() }
    }

    pub fn run<F>(&mut self, name: &str, store: &ParamStore<f64>, inputs: Vec<Tensor<f64>>, build: F)
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    {
        let seed = self.outcomes.len() as u64 + 7;
        self.outcomes.push(match check_with_step(store, &inputs, build, POINTS, seed, self.step) {
            Ok(r) => Outcome {
                name: name.into(),
                points: r.points,
                max_rel_err: r.max_rel_err,
                detail: format!("{:?}", r.worst),
            },
            Err(e) => Outcome {
                name: name.into(),
                points: 0,
                max_rel_err: f64::INFINITY,
                detail: e.to_string(),
            },
        });
    }

    pub fn inputs<F>(&mut self, name: &str, inputs: Vec<Tensor<f64>>, build: F)
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    {
        self.run(name, &ParamStore::new(), inputs, build);
    }

    pub fn failures(&self) -> Vec<String> {
        self.outcomes
            .iter()
            .filter(|o| !o.passed())
            .map(|o| format!("{}: {:.3e} over {} points ({})", o.name, o.max_rel_err, o.points, o.detail))
            .collect()
    }

    pub fn worst(&self) -> f64 {
        self.outcomes.iter().map(|o| o.max_rel_err).fold(0.0, f64::max)
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Values bounded away from zero so ReLU kinks are never straddled.
fn away_from_zero(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = random_tensor(shape, 1.0, r);
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v = if *v < 0.0 { -0.05 - v.abs() } else { 0.05 + *v };
        }
    }
    t
}

/// Distinct values at least 0.01 apart, so max-pool winners never swap.
fn distinct(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - n as f64 * 0.005).collect();
    vals.shuffle(r);
    Tensor::new(shape, vals).unwrap()
}

pub fn op_suite() -> Suite {
    let mut s = Suite::new(STEP);
    let mut r = rng(1);

    let inputs = vec![
        random_tensor(&[3, 4], 1.0, &mut r),
        random_tensor(&[4, 5], 1.0, &mut r),
        random_tensor(&[5], 1.0, &mut r),
    ];
    s.inputs("linear", inputs, |g, v| {
        let y = g.linear(v[0], v[1], v[2])?;
        probe(g, y, 1)
    });
    let inputs = vec![random_tensor(&[3, 4], 1.0, &mut r), random_tensor(&[4, 2], 1.0, &mut r)];
    s.inputs("matmul", inputs, |g, v| {
        let y = g.matmul(v[0], v[1])?;
        probe(g, y, 2)
    });
    let inputs = vec![random_tensor(&[3, 4], 1.0, &mut r), random_tensor(&[5, 4], 1.0, &mut r)];
    s.inputs("matmul_bt", inputs, |g, v| {
        let y = g.matmul_bt(v[0], v[1])?;
        probe(g, y, 3)
    });

    let a = random_tensor(&[2, 3], 1.0, &mut r);
    let b = random_tensor(&[2, 3], 1.0, &mut r);
    s.inputs("add", vec![a.clone(), b.clone()], |g, v| {
        let y = g.add(v[0], v[1])?;
        probe(g, y, 4)
    });
    s.inputs("sub", vec![a.clone(), b.clone()], |g, v| {
        let y = g.sub(v[0], v[1])?;
        probe(g, y, 5)
    });
    s.inputs("mul", vec![a.clone(), b], |g, v| {
        let y = g.mul(v[0], v[1])?;
        probe(g, y, 6)
    });
    s.inputs("scale", vec![a], |g, v| {
        let y = g.scale(v[0], -1.7);
        probe(g, y, 7)
    });

    s.inputs("gelu", vec![random_tensor(&[4, 6], 3.0, &mut r)], |g, v| {
        let y = g.gelu(v[0]);
        probe(g, y, 8)
    });
    s.inputs("relu", vec![away_from_zero(&[4, 6], &mut r)], |g, v| {
        let y = g.relu(v[0]);
        probe(g, y, 9)
    });
    s.inputs("sigmoid", vec![random_tensor(&[4, 6], 4.0, &mut r)], |g, v| {
        let y = g.sigmoid(v[0]);
        probe(g, y, 10)
    });
    s.inputs("dropout", vec![random_tensor(&[5, 8], 1.0, &mut r)], |g, v| {
        let mut mask_rng = rng(99);
        let y = g.dropout(v[0], 0.4, &mut mask_rng)?;
        probe(g, y, 11)
    });

    for (i, padding) in [Padding::Same, Padding::Valid, Padding::Explicit(0, 2)].into_iter().enumerate() {
        let inputs = vec![
            random_tensor(&[2, 3, 5, 7], 1.0, &mut r),
            random_tensor(&[4, 3, 3, 5], 1.0, &mut r),
            random_tensor(&[4], 1.0, &mut r),
        ];
        s.inputs(&format!("conv2d {padding:?}"), inputs, move |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), padding)?;
            probe(g, y, 12 + i as u64)
        });
    }
    let inputs = vec![
        random_tensor(&[2, 4, 2, 6], 1.0, &mut r),
        random_tensor(&[4, 3, 1, 5], 1.0, &mut r),
        random_tensor(&[3], 1.0, &mut r),
    ];
    s.inputs("conv_transpose2d", inputs, |g, v| {
        let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), Padding::Explicit(0, 2))?;
        probe(g, y, 16)
    });
    let inputs = vec![random_tensor(&[1, 2, 3, 4], 1.0, &mut r), random_tensor(&[2, 3, 2, 3], 1.0, &mut r)];
    s.inputs("conv_transpose2d valid", inputs, |g, v| {
        let y = g.conv_transpose2d(v[0], v[1], None, Padding::Valid)?;
        probe(g, y, 17)
    });

    s.inputs("max_pool2d", vec![distinct(&[2, 3, 5, 9], &mut r)], |g, v| {
        let y = g.max_pool2d(v[0], 2, 2)?;
        probe(g, y, 18)
    });
    s.inputs("upsample2d", vec![random_tensor(&[2, 2, 1, 5], 1.0, &mut r)], |g, v| {
        let y = g.upsample2d(v[0], 1, 2)?;
        probe(g, y, 19)
    });
    s.inputs("reshape", vec![random_tensor(&[2, 3, 4], 1.0, &mut r)], |g, v| {
        let y = g.reshape(v[0], &[6, 4])?;
        probe(g, y, 20)
    });
    s.inputs("flatten", vec![random_tensor(&[2, 3, 2], 1.0, &mut r)], |g, v| {
        let y = g.flatten(v[0])?;
        probe(g, y, 21)
    });
    let parts = vec![
        random_tensor(&[3, 2], 1.0, &mut r),
        random_tensor(&[3, 4], 1.0, &mut r),
        random_tensor(&[3, 1], 1.0, &mut r),
    ];
    s.inputs("concat_cols", parts, |g, v| {
        let y = g.concat_cols(v)?;
        probe(g, y, 22)
    });
    let parts = vec![random_tensor(&[2, 3], 1.0, &mut r), random_tensor(&[4, 3], 1.0, &mut r)];
    s.inputs("concat_rows", parts, |g, v| {
        let y = g.concat_rows(v)?;
        probe(g, y, 23)
    });

    let inputs = vec![
        random_tensor(&[4, 6], 2.0, &mut r),
        random_tensor(&[6], 1.0, &mut r),
        random_tensor(&[6], 1.0, &mut r),
    ];
    s.inputs("layer_norm", inputs, |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
        probe(g, y, 24)
    });
    s.inputs("l2_normalize_rows", vec![random_tensor(&[4, 5], 1.0, &mut r)], |g, v| {
        let y = g.l2_normalize_rows(v[0])?;
        probe(g, y, 25)
    });
    // Training-mode graphs exercise the batch statistics.
    let mut store = ParamStore::<f64>::new();
    let rm = store.add_buffer("rm", random_tensor(&[3], 0.5, &mut r));
    let rv = store.add_buffer("rv", Tensor::new(&[3], vec![0.6, 1.1, 1.7]).unwrap());
    let inputs = vec![
        random_tensor(&[3, 3, 2, 4], 2.0, &mut r),
        random_tensor(&[3], 1.0, &mut r),
        random_tensor(&[3], 1.0, &mut r),
    ];
    s.run("batch_norm2d", &store, inputs, |g, v| {
        let y = g.batch_norm2d(v[0], v[1], v[2], rm, rv, 0.1, 1e-5)?;
        probe(g, y, 26)
    });

    let logits = random_tensor(&[5, 4], 2.0, &mut r);
    let targets = [0usize, 3, 1, 1, 2];
    s.inputs("cross_entropy sum", vec![logits.clone()], move |g, v| {
        g.cross_entropy(v[0], &targets, None, Reduction::Sum, false)
    });
    let weights = [1.0, 2.0, 0.5, 3.0];
    s.inputs("cross_entropy weighted mean", vec![logits], move |g, v| {
        g.cross_entropy(v[0], &targets, Some(&weights), Reduction::Mean, false)
    });
    let shifted = [2usize, 3, 0, 1];
    s.inputs("cross_entropy masked diagonal", vec![random_tensor(&[4, 4], 2.0, &mut r)], move |g, v| {
        g.cross_entropy(v[0], &shifted, None, Reduction::Mean, true)
    });
    let bce_targets: Vec<f64> = (0..6).map(|_| if r.random::<bool>() { 1.0 } else { 0.0 }).collect();
    s.inputs("bce_with_logits", vec![random_tensor(&[6, 1], 3.0, &mut r)], move |g, v| {
        g.bce_with_logits(v[0], &bce_targets)
    });
    let target = random_tensor(&[3, 4], 1.0, &mut r);
    s.inputs("mse", vec![random_tensor(&[3, 4], 1.0, &mut r)], move |g, v| g.mse(v[0], &target));
    s.inputs("sum", vec![random_tensor(&[3, 4], 1.0, &mut r)], |g, v| {
        let sq = g.mul(v[0], v[0])?;
        Ok(g.sum(sq))
    });
    s.inputs("mean", vec![random_tensor(&[3, 4], 1.0, &mut r)], |g, v| {
        let sq = g.mul(v[0], v[0])?;
        Ok(g.mean(sq))
    });
    s
}

const SENSORS: usize = 2;
const BATCH: usize = 3;

fn batch_input(m: Modality, r: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut shape = vec![BATCH];
    shape.extend(m.input_shape(SENSORS));
    random_tensor(&shape, 1.0, r)
}

pub fn model_suite() -> Suite {
    let mut s = Suite::new(MODEL_STEP);
    let mut r = rng(11);

    for m in Modality::ALL {
        let mut store = ParamStore::<f64>::new();
        let tower = ModalityModel::new(&mut store, m, SENSORS, &mut r).unwrap();
        let x = batch_input(m, &mut r);
        s.run(&format!("rep_forward {m}"), &store, vec![x], |g, v| {
            let rep = tower.rep_forward(g, v[0], &mut rng(5))?;
            probe(g, rep, 30)
        });
    }

    let mut store = ParamStore::<f64>::new();
    let sensor = ModalityModel::new(&mut store, Modality::Sensor, SENSORS, &mut r).unwrap();
    let video = ModalityModel::new(&mut store, Modality::Video, SENSORS, &mut r).unwrap();
    let head = ClassifierHead::new(&mut store, "head", 2 * REP_DIM, 4, &mut r).unwrap();
    let labels = [2usize, 0, 2];
    let weights = class_weights(&[1, 1, 2, 1]).unwrap();
    let inputs = vec![batch_input(Modality::Sensor, &mut r), batch_input(Modality::Video, &mut r)];
    s.run("classifier", &store, inputs, |g, v| {
        let mut drop = rng(6);
        let a = sensor.rep_forward(g, v[0], &mut drop)?;
        let b = video.rep_forward(g, v[1], &mut drop)?;
        let features = g.concat_cols(&[a, b])?;
        let logits = head.forward(g, features)?;
        weighted_ce(g, logits, &labels, &weights)
    });

    let mut store = ParamStore::<f64>::new();
    let tower = ModalityModel::new(&mut store, Modality::Sensor, SENSORS, &mut r).unwrap();
    let simclr = SimclrHead::new(&mut store, "simclr", &mut r);
    let inputs = vec![batch_input(Modality::Sensor, &mut r), batch_input(Modality::Sensor, &mut r)];
    s.run("simclr head", &store, inputs, |g, v| {
        let mut drop = rng(7);
        let a = tower.rep_forward(g, v[0], &mut drop)?;
        let za = simclr.forward(g, a)?;
        let b = tower.rep_forward(g, v[1], &mut drop)?;
        let zb = simclr.forward(g, b)?;
        ntxent_loss(g, za, zb, 0.1)
    });

    let mut store = ParamStore::<f64>::new();
    let tower = ModalityModel::new(&mut store, Modality::Sensor, SENSORS, &mut r).unwrap();
    let task = TaskHead::new(&mut store, "task", &mut r);
    s.run("task head", &store, vec![batch_input(Modality::Sensor, &mut r)], |g, v| {
        let rep = tower.rep_forward(g, v[0], &mut rng(8))?;
        let logits = task.forward(g, rep)?;
        g.bce_with_logits(logits, &[1.0, 0.0, 1.0])
    });

    let mut store = ParamStore::<f64>::new();
    let tower = ModalityModel::new(&mut store, Modality::Sensor, SENSORS, &mut r).unwrap();
    let decoder = Decoder::new(&mut store, "decoder", SENSORS, &mut r).unwrap();
    let x = batch_input(Modality::Sensor, &mut r);
    let target = x.clone();
    s.run("decoder", &store, vec![x], move |g, v| {
        let mut drop = rng(9);
        let rep = tower.rep_forward(g, v[0], &mut drop)?;
        let y = decoder.forward(g, rep, &mut drop)?;
        g.mse(y, &target)
    });

    let pair = vec![random_tensor(&[4, 6], 1.0, &mut r), random_tensor(&[4, 6], 1.0, &mut r)];
    s.inputs("info_nce", pair.clone(), |g, v| info_nce(g, v[0], v[1], 0.1));
    s.inputs("ntxent", pair, |g, v| ntxent_loss(g, v[0], v[1], 0.1));
    let triple = (0..3).map(|_| random_tensor(&[4, 6], 1.0, &mut r)).collect();
    s.inputs("total_loss", triple, |g, v| {
        let reps = [(Modality::Text, v[0]), (Modality::Pose, v[1]), (Modality::Sensor, v[2])];
        Ok(total_loss(g, &reps, 0.1)?.loss)
    });
    let weights = class_weights(&[3, 1, 2]).unwrap();
    s.inputs("weighted_ce", vec![random_tensor(&[5, 3], 2.0, &mut r)], move |g, v| {
        weighted_ce(g, v[0], &[0, 1, 2, 1, 0], &weights)
    });
    s
}
