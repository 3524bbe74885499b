//! Finite-difference checks of the trainable parts on instances small
//! enough to probe every scalar.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use uld_core::bootstrap::{correspondence_nll, nll_var, PairGeometry};
use uld_core::geometry::SimilarityTransform;
use uld_core::heads::{HeadConfig, HeadParams, Heatmap, HeatmapSource, DESCRIPTOR_PREFIX, DETECTOR_PREFIX};
use uld_core::nn::{ParamId, ParamStore};
use uld_core::pose_proxy::{Vae, VaeConfig, DECODER_PREFIX, ENCODER_PREFIX};
use uld_core::tape::{Mat, Tape, Var};

use super::{numeric_grad, relative_error};

pub const TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = 1e-5;

/// Worst relative error and number of probed scalars.
pub struct Check {
    pub error: f64,
    pub scalars: usize,
}

fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Mat {
    Mat::from_shape_simple_fn((r, c), || rng.random_range(lo..hi))
}

/// Worst per-tensor relative error over parameters whose name starts with
/// `prefix`.
fn worst_error<M: Clone>(
    model: &M,
    store: fn(&M) -> &ParamStore,
    store_mut: fn(&mut M) -> &mut ParamStore,
    prefix: &str,
    loss: &dyn Fn(&M, &mut Tape) -> Var,
) -> Check {
    let mut tape = Tape::new();
    let l = loss(model, &mut tape);
    let grads = tape.backward(l);
    let analytic = store(model).collect_grads(&tape, &grads);
    let names: Vec<String> = store(model).iter().map(|(n, _)| n.to_string()).collect();
    let mut check = Check { error: 0.0, scalars: 0 };
    for (i, name) in names.iter().enumerate() {
        if !name.starts_with(prefix) {
            continue;
        }
        let value = store(model).get(ParamId(i)).clone();
        check.scalars += value.len();
        let numeric = numeric_grad(&value, STEP, |probe| {
            let mut m = model.clone();
            *store_mut(&mut m).get_mut(ParamId(i)) = probe.clone();
            let mut t = Tape::new();
            let v = loss(&m, &mut t);
            t.scalar(v)
        });
        let a = analytic[i].clone().unwrap_or_else(|| Mat::zeros(value.raw_dim()));
        check.error = check.error.max(relative_error(&a, &numeric));
    }
    check
}

fn heads() -> (HeadParams, Mat, Mat, Mat) {
    let config = HeadConfig { in_channels: 3, hidden: 4, descriptor_dim: 3 };
    let p = HeadParams::new(config, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random_mat(&mut rng, 25, 3, -1.0, 1.0);
    let wd = random_mat(&mut rng, 25, 1, -1.0, 1.0);
    let wf = random_mat(&mut rng, 25, 3, -1.0, 1.0);
    (p, x, wd, wf)
}

pub fn head_scalars() -> usize {
    heads().0.store.num_scalars()
}

pub fn detector() -> Check {
    let (p, x, wd, _) = heads();
    let loss = |m: &HeadParams, t: &mut Tape| {
        let xv = t.constant(x.clone());
        let h = m.detect_var(t, xv, 5, 5);
        let w = t.constant(wd.clone());
        let s = t.mul(h, w);
        t.sum(s)
    };
    worst_error(&p, |m| &m.store, |m| &mut m.store, DETECTOR_PREFIX, &loss)
}

pub fn descriptor() -> Check {
    let (p, x, _, wf) = heads();
    let loss = |m: &HeadParams, t: &mut Tape| {
        let xv = t.constant(x.clone());
        let f = m.describe_var(t, xv, 5, 5);
        let w = t.constant(wf.clone());
        let s = t.mul(f, w);
        t.sum(s)
    };
    worst_error(&p, |m| &m.store, |m| &mut m.store, DESCRIPTOR_PREFIX, &loss)
}

fn tiny_vae() -> (Vae, Mat, Heatmap, Vec<f64>) {
    let vae = Vae::new(VaeConfig { height: 8, width: 8, channels: vec![2, 2], latent_dim: 3, beta: 1.0, seed: 4 }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let input = random_mat(&mut rng, 64, 1, 0.0, 1.0);
    let target = Heatmap::from_rows(&random_mat(&mut rng, 64, 1, 0.0, 1.0), 8, 8, HeatmapSource::PseudoGt);
    (vae, input, target, vec![0.3, -1.1, 0.7])
}

pub fn vae_scalars() -> usize {
    tiny_vae().0.store.num_scalars()
}

fn vae_check(prefix: &str) -> Check {
    let (vae, input, target, eps) = tiny_vae();
    let loss = |m: &Vae, t: &mut Tape| {
        let x = t.constant(input.clone());
        m.elbo_var(t, x, &target, &eps).unwrap()
    };
    worst_error(&vae, |m| &m.store, |m| &mut m.store, prefix, &loss)
}

pub fn encoder() -> Check {
    vae_check(ENCODER_PREFIX)
}

pub fn decoder() -> Check {
    vae_check(DECODER_PREFIX)
}

/// Gradient error of the correspondence loss and the gap between its
/// taped and plain values.
pub fn correspondence() -> (Check, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let desc = random_mat(&mut rng, 16, 8, -1.0, 1.0);
    let desc_aug = random_mat(&mut rng, 16, 8, -1.0, 1.0);
    let mut t = SimilarityTransform::identity(4, 4);
    t.flip = true;
    let pair = PairGeometry::new(t, 4, 4);
    let positions: Vec<usize> = (0..16).collect();
    let matches: Vec<(usize, usize)> = positions.iter().filter_map(|&q| pair.target_of(q).map(|m| (q, m))).collect();
    let tau = 0.1;

    let mut store = ParamStore::new();
    let a = store.add("a", desc.clone());
    let b = store.add("b", desc_aug.clone());
    let mut tape = Tape::new();
    let (av, bv) = (store.bind(&mut tape, a), store.bind(&mut tape, b));
    let l = nll_var(&mut tape, av, bv, &matches, tau);
    let pure = correspondence_nll(&desc, &desc_aug, &pair, tau, &positions).unwrap();
    let gap = (tape.scalar(l) - pure).abs();
    let grads = store.collect_grads(&tape, &tape.backward(l));

    let ga = numeric_grad(&desc, STEP, |d| correspondence_nll(d, &desc_aug, &pair, tau, &positions).unwrap());
    let gb = numeric_grad(&desc_aug, STEP, |d| correspondence_nll(&desc, d, &pair, tau, &positions).unwrap());
    let error = relative_error(grads[0].as_ref().unwrap(), &ga).max(relative_error(grads[1].as_ref().unwrap(), &gb));
    (Check { error, scalars: desc.len() + desc_aug.len() }, gap)
}
