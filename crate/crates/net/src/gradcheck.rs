//! Central finite-difference checks of the hand-written backward passes.
//!
//! Each check projects a module output onto a fixed random vector, then
//! compares the taped gradient with (f(x + h) − f(x − h)) / 2h at random
//! coordinates of the parameters and inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ulfdti::resample::{downsample_op, linear_between};
use ulfdti::VolumeGrid;

use crate::graph::{GraphConvLayer, IcoBlock, VERTICES};
use crate::loss::{CompositeLoss, LossWeights};
use crate::model::{DiffSrModel, ModelConfig};
use crate::params::{Init, ParamStore};
use crate::tape::{Tape, Tensor, Var};
use crate::unet::{MiniUNet, MiniUNetConfig};

pub const STEP: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub points: usize,
    pub max_rel_error: f64,
}

/// |fd − an| / max(|fd|, |an|, floor).
pub fn rel_error(fd: f64, an: f64, floor: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(floor)
}

fn random_tensor(shape: Vec<usize>, scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect())
}

/// Checks `build` (leaves → output) at `points` random leaf coordinates.
/// Coordinates with an analytic gradient below 1e-6 of the largest are
/// skipped in favour of another draw, since their relative error is
/// meaningless.
pub fn check_tape<F>(leaves: &[Tensor], build: F, points: usize, seed: u64) -> GradCheck
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eval = |ls: &[Tensor], proj: Option<&[f64]>| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ls.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars);
        let y = tape.value(out).data.clone();
        (tape, vars, out, y, proj.map(<[f64]>::to_vec))
    };
    let (tape, vars, out, y, _) = eval(leaves, None);
    let r: Vec<f64> = (0..y.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let grads = tape.backward(out, r.clone());
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(leaves)
        .map(|(&v, t)| grads.get(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();
    let gmax = analytic.iter().flatten().fold(0.0f64, |m, g| m.max(g.abs()));
    let scalar = |ls: &[Tensor]| {
        let (_, _, _, y, _) = eval(ls, None);
        y.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>()
    };
    let mut worst = 0.0f64;
    let mut done = 0;
    let mut tries = 0;
    while done < points && tries < 100 * points {
        tries += 1;
        let li = rng.random_range(0..leaves.len());
        if leaves[li].is_empty() {
            continue;
        }
        let k = rng.random_range(0..leaves[li].len());
        let an = analytic[li][k];
        if an.abs() < 1e-6 * gmax {
            continue;
        }
        let mut plus = leaves.to_vec();
        plus[li].data[k] += STEP;
        let mut minus = leaves.to_vec();
        minus[li].data[k] -= STEP;
        let fd = (scalar(&plus) - scalar(&minus)) / (2.0 * STEP);
        worst = worst.max(rel_error(fd, an, 1e-6 * gmax));
        done += 1;
    }
    GradCheck {
        points: done,
        max_rel_error: worst,
    }
}

/// Replace all-zero parameter tensors (zero-initialized heads and readouts)
/// by small random values so every path carries gradient.
pub fn randomize_zero_params(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for t in &mut store.values {
        if t.data.iter().all(|&v| v == 0.0) {
            t.data.iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
        }
    }
}

fn with_input(store: &ParamStore, input: Tensor) -> Vec<Tensor> {
    let mut leaves = store.values.clone();
    leaves.push(input);
    leaves
}

pub fn check_graph_conv(points: usize, seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let layer = GraphConvLayer::new(&mut store, "g", 3, 4, Init::Normal(0.5), &mut rng);
    store.get_mut(layer.wn).data = vec![0.7];
    randomize_zero_params(&mut store, &mut rng);
    let knn = std::rc::Rc::new(ulfdti::sh::build_icosphere().knn);
    let leaves = with_input(&store, random_tensor(vec![3, 2 * VERTICES], 1.0, &mut rng));
    check_tape(&leaves, |tape, v| layer.forward(tape, v, v[v.len() - 1], &knn), points, seed)
}

pub fn check_ico_block(points: usize, seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let block = IcoBlock::new(&mut store, "ico", 4, &mut rng);
    randomize_zero_params(&mut store, &mut rng);
    let leaves = with_input(&store, random_tensor(vec![6, 3], 1.0, &mut rng));
    check_tape(&leaves, |tape, v| block.forward(tape, v, v[v.len() - 1]), points, seed)
}

/// 8³ input, two levels, four base features.
pub fn check_unet(points: usize, seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cfg = MiniUNetConfig {
        levels: 2,
        base_features: 4,
        global_tokens: 8,
        in_channels: 7,
    };
    let net = MiniUNet::new(&mut store, &cfg, &mut rng).expect("valid config");
    randomize_zero_params(&mut store, &mut rng);
    let leaves = with_input(&store, random_tensor(vec![7, 8, 8, 8], 1.0, &mut rng));
    check_tape(&leaves, |tape, v| net.forward(tape, v, v[v.len() - 1]), points, seed)
}

/// Whole network on a 4³ input with two base features.
pub fn check_model(points: usize, seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = DiffSrModel::new(ModelConfig {
        unet: MiniUNetConfig {
            base_features: 2,
            global_tokens: 2,
            ..MiniUNetConfig::default()
        },
        ico_hidden: 3,
        seed,
    })
    .expect("valid config");
    randomize_zero_params(&mut model.params, &mut rng);
    let leaves = with_input(&model.params, random_tensor(vec![7, 4, 4, 4], 1.0, &mut rng));
    check_tape(&leaves, |tape, v| model.forward(tape, v, v[v.len() - 1]), points, seed)
}

/// Composite loss on a 4³ field with a 2× resampling consistency operator.
/// Each term is checked on its own as well as the weighted total; the
/// worst relative error over all of them is reported.
pub fn check_loss(points: usize, seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = [4, 4, 4];
    let grid = VolumeGrid::isotropic(dims, 1.0);
    let (down, coarse) = downsample_op(&grid, [2.0; 3]);
    let op = down.then(&linear_between(&coarse, &grid));
    let target = random_tensor(vec![7, 4, 4, 4], 1.0, &mut rng);
    let lr = random_tensor(vec![7, 4, 4, 4], 1.0, &mut rng);
    let pred = random_tensor(vec![7, 4, 4, 4], 1.0, &mut rng);
    let mut worst = GradCheck {
        points: 0,
        max_rel_error: 0.0,
    };
    let zero = LossWeights {
        w_lowb_l2: 0.0,
        w_l2order_l1: 0.0,
        w_angular: 0.0,
        w_consistency: 0.0,
        ..LossWeights::default()
    };
    let variants = [
        LossWeights::default(),
        LossWeights { w_lowb_l2: 1.0, ..zero.clone() },
        LossWeights { w_l2order_l1: 1.0, ..zero.clone() },
        LossWeights { w_angular: 1.0, ..zero.clone() },
        LossWeights { w_consistency: 1.0, ..zero },
    ];
    for (i, w) in variants.into_iter().enumerate() {
        let loss = CompositeLoss::new(w).expect("valid weights");
        let f = |p: &Tensor| loss.evaluate(p, &target, &lr, Some(&op)).expect("shapes match");
        let (_, grad) = f(&pred);
        let gmax = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        let mut prng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64 + 1));
        let mut done = 0;
        while done < points {
            let k = prng.random_range(0..pred.len());
            if grad[k].abs() < 1e-6 * gmax {
                continue;
            }
            let (mut a, mut b) = (pred.clone(), pred.clone());
            a.data[k] += STEP;
            b.data[k] -= STEP;
            let fd = (f(&a).0.total - f(&b).0.total) / (2.0 * STEP);
            worst.max_rel_error = worst.max_rel_error.max(rel_error(fd, grad[k], 1e-6 * gmax));
            done += 1;
        }
        worst.points += done;
    }
    worst
}
