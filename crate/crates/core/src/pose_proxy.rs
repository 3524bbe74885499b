//! Pose proxy task: a small convolutional VAE on detector heatmaps.
//!
//! The encoder compresses a heatmap into a latent pose code, the decoder
//! reconstructs the pseudo ground-truth Gaussian map from that code. Codes
//! of images with the same pose cluster are pulled together by a margin
//! loss during pose-aware self-training.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::clustering::LatentEncoder;
use crate::error::{Result, UldError};
use crate::heads::{Heatmap, HeatmapSource};
use crate::losses::{check_triple_labels, margin_contrastive, margin_contrastive_var};
use crate::nn::{Activation, Conv, Linear, ParamStore};
use crate::tape::{sigmoid, Mat, Tape, Var};

pub const ENCODER_PREFIX: &str = "vae.enc.";
pub const DECODER_PREFIX: &str = "vae.dec.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub height: usize,
    pub width: usize,
    /// Channels of each stride-2 encoder block; the decoder mirrors them.
    pub channels: Vec<usize>,
    pub latent_dim: usize,
    /// Weight of the KL term.
    pub beta: f64,
    pub seed: u64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            height: 32,
            width: 32,
            channels: vec![4, 8, 8, 8],
            latent_dim: 64,
            beta: 1.0,
            seed: 21,
        }
    }
}

/// Encoder output for one heatmap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentPoseCode {
    pub phi: Vec<f64>,
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
    /// Standard normal draw used for `phi`, absent at inference.
    pub eps: Option<Vec<f64>>,
    pub pose_label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vae {
    pub store: ParamStore,
    pub config: VaeConfig,
    enc: Vec<Conv>,
    enc_mu: Linear,
    enc_log_var: Linear,
    dec_fc: Linear,
    dec: Vec<Conv>,
    dec_out: Conv,
    /// Spatial size at the bottleneck.
    code_h: usize,
    code_w: usize,
}

/// Encoder variables on a tape.
#[derive(Debug, Clone, Copy)]
pub struct EncodedVars {
    pub mu: Var,
    pub log_var: Var,
}

impl Vae {
    pub fn new(config: VaeConfig) -> Result<Self> {
        let blocks = config.channels.len();
        if blocks == 0 || config.latent_dim == 0 {
            return Err(UldError::Config("VAE needs at least one block and a non-empty code".into()));
        }
        let div = 1usize << blocks;
        if !config.height.is_multiple_of(div) || !config.width.is_multiple_of(div) {
            return Err(UldError::Config(format!(
                "heatmap size {}x{} is not divisible by {div}",
                config.height, config.width
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let mut enc = Vec::with_capacity(blocks);
        let mut c_in = 1;
        for (i, &c) in config.channels.iter().enumerate() {
            enc.push(Conv::new(&mut store, &format!("{ENCODER_PREFIX}conv{i}"), 3, 2, c_in, c, Activation::Silu, &mut rng));
            c_in = c;
        }
        let (code_h, code_w) = (config.height / div, config.width / div);
        let flat = code_h * code_w * c_in;
        let z = config.latent_dim;
        let enc_mu = Linear::new(&mut store, &format!("{ENCODER_PREFIX}mu"), flat, z, Activation::Identity, &mut rng);
        let enc_log_var = Linear::new(
            &mut store,
            &format!("{ENCODER_PREFIX}log_var"),
            flat,
            z,
            Activation::Identity,
            &mut rng,
        );
        // start with unit posterior variance
        for v in store.get_mut(enc_log_var.weight).iter_mut() {
            *v *= 0.1;
        }
        let dec_fc = Linear::new(&mut store, &format!("{DECODER_PREFIX}fc"), z, flat, Activation::Silu, &mut rng);
        let mut dec = Vec::with_capacity(blocks);
        for i in (0..blocks).rev() {
            let c_out = if i == 0 { config.channels[0] } else { config.channels[i - 1] };
            dec.push(Conv::new(
                &mut store,
                &format!("{DECODER_PREFIX}conv{i}"),
                3,
                1,
                c_in,
                c_out,
                Activation::Silu,
                &mut rng,
            ));
            c_in = c_out;
        }
        let dec_out = Conv::new(&mut store, &format!("{DECODER_PREFIX}out"), 3, 1, c_in, 1, Activation::Identity, &mut rng);
        Ok(Vae {
            store,
            config,
            enc,
            enc_mu,
            enc_log_var,
            dec_fc,
            dec,
            dec_out,
            code_h,
            code_w,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn check_heatmap(&self, h: &Heatmap) -> Result<()> {
        let want = (self.config.height, self.config.width);
        if h.grid.dim() != want {
            return Err(UldError::shape("VAE heatmap", format!("{want:?}"), format!("{:?}", h.grid.dim())));
        }
        Ok(())
    }

    /// Records the encoder on `tape`; `x` is an `(H*W) x 1` heatmap.
    pub fn encode_var(&self, tape: &mut Tape, x: Var) -> EncodedVars {
        let (mut h, mut w) = (self.config.height, self.config.width);
        let mut y = x;
        for conv in &self.enc {
            y = conv.forward(tape, &self.store, y, h, w);
            (h, w) = conv.out_size(h, w);
        }
        let flat = tape.reshape(y, 1, h * w * self.enc.last().expect("non-empty").c_out);
        EncodedVars {
            mu: self.enc_mu.forward(tape, &self.store, flat),
            log_var: self.enc_log_var.forward(tape, &self.store, flat),
        }
    }

    /// `mu + exp(log_var / 2) * eps` with a fixed standard normal `eps`.
    pub fn reparameterize_var(&self, tape: &mut Tape, enc: EncodedVars, eps: &[f64]) -> Var {
        let half = tape.scale(enc.log_var, 0.5);
        let sd = tape.exp(half);
        let e = tape.constant(Mat::from_shape_vec((1, eps.len()), eps.to_vec()).expect("row"));
        let noise = tape.mul(sd, e);
        tape.add(enc.mu, noise)
    }

    /// Records the decoder on `tape`; returns `(H*W) x 1` logits.
    pub fn decode_logits_var(&self, tape: &mut Tape, z: Var) -> Var {
        let c0 = self.enc.last().expect("non-empty").c_out;
        let y = self.dec_fc.forward(tape, &self.store, z);
        let mut y = tape.reshape(y, self.code_h * self.code_w, c0);
        let (mut h, mut w) = (self.code_h, self.code_w);
        for conv in &self.dec {
            y = tape.upsample2(y, h, w);
            (h, w) = (2 * h, 2 * w);
            y = conv.forward(tape, &self.store, y, h, w);
        }
        self.dec_out.forward(tape, &self.store, y, h, w)
    }

    fn heatmap_var(tape: &mut Tape, h: &Heatmap) -> Var {
        tape.constant(h.to_rows())
    }

    /// Posterior mean as the code (inference mode).
    pub fn encode(&self, h: &Heatmap) -> Result<LatentPoseCode> {
        self.check_heatmap(h)?;
        let mut tape = Tape::new();
        let x = Self::heatmap_var(&mut tape, h);
        let e = self.encode_var(&mut tape, x);
        let mu = tape.value(e.mu).iter().copied().collect::<Vec<_>>();
        let log_var = tape.value(e.log_var).iter().copied().collect::<Vec<_>>();
        Ok(LatentPoseCode {
            phi: mu.clone(),
            mu,
            log_var,
            eps: None,
            pose_label: None,
        })
    }

    /// Reparameterised sample; the draw is kept in the result.
    pub fn encode_sample<R: Rng>(&self, h: &Heatmap, rng: &mut R) -> Result<LatentPoseCode> {
        let mut code = self.encode(h)?;
        let eps: Vec<f64> = (0..code.mu.len()).map(|_| rng.sample(StandardNormal)).collect();
        code.phi = reparameterize(&code.mu, &code.log_var, &eps);
        code.eps = Some(eps);
        Ok(code)
    }

    /// Sigmoid reconstruction of a code.
    pub fn decode(&self, phi: &[f64]) -> Result<Heatmap> {
        if phi.len() != self.latent_dim() {
            return Err(UldError::shape("latent code", self.latent_dim(), phi.len()));
        }
        let mut tape = Tape::new();
        let z = tape.constant(Mat::from_shape_vec((1, phi.len()), phi.to_vec()).expect("row"));
        let logits = self.decode_logits_var(&mut tape, z);
        let probs = tape.value(logits).mapv(sigmoid);
        Ok(Heatmap::from_rows(&probs, self.config.height, self.config.width, HeatmapSource::PseudoGt))
    }

    /// Negative ELBO on `tape` for one heatmap and target, using the given
    /// noise draw.
    pub fn elbo_var(&self, tape: &mut Tape, input: Var, target: &Heatmap, eps: &[f64]) -> Result<Var> {
        self.check_heatmap(target)?;
        let e = self.encode_var(tape, input);
        let z = self.reparameterize_var(tape, e, eps);
        let logits = self.decode_logits_var(tape, z);
        let recon = bce_logits_sum_var(tape, logits, &target.to_rows());
        let kl = kl_var(tape, e.mu, e.log_var);
        let kl = tape.scale(kl, self.config.beta);
        Ok(tape.add(recon, kl))
    }
}

impl LatentEncoder for Vae {
    fn latent(&self, heatmap: &Heatmap) -> Result<Vec<f64>> {
        Ok(self.encode(heatmap)?.mu)
    }
}

pub fn reparameterize(mu: &[f64], log_var: &[f64], eps: &[f64]) -> Vec<f64> {
    mu.iter()
        .zip(log_var)
        .zip(eps)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect()
}

/// `KL(N(mu, sigma^2) || N(0, I))` in closed form.
pub fn kl_divergence(mu: &[f64], log_var: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(log_var)
        .map(|(m, lv)| m * m + lv.exp() - 1.0 - lv)
        .sum::<f64>()
}

fn kl_var(tape: &mut Tape, mu: Var, log_var: Var) -> Var {
    let m2 = tape.square(mu);
    let s2 = tape.exp(log_var);
    let a = tape.add(m2, s2);
    let b = tape.sub(a, log_var);
    let c = tape.add_const(b, -1.0);
    let s = tape.sum(c);
    tape.scale(s, 0.5)
}

/// Summed BCE of sigmoid(logits) against targets in [0, 1].
pub fn bce_logits_sum_var(tape: &mut Tape, logits: Var, target: &Mat) -> Var {
    let y = tape.constant(target.clone());
    let sp = tape.softplus(logits);
    let yz = tape.mul(y, logits);
    let e = tape.sub(sp, yz);
    tape.sum(e)
}

/// Summed per-pixel BCE of `recon` against `target`, plus `beta` times the
/// KL term. `0 * log 0` counts as 0.
pub fn elbo_loss(recon: &Heatmap, target: &Heatmap, mu: &[f64], log_var: &[f64], beta: f64) -> Result<f64> {
    if recon.grid.dim() != target.grid.dim() {
        return Err(UldError::shape(
            "reconstruction",
            format!("{:?}", target.grid.dim()),
            format!("{:?}", recon.grid.dim()),
        ));
    }
    if mu.len() != log_var.len() {
        return Err(UldError::shape("posterior parameters", mu.len(), log_var.len()));
    }
    let rec: f64 = recon
        .grid
        .iter()
        .zip(target.grid.iter())
        .map(|(&p, &y)| crate::bootstrap::bce(p, y))
        .sum();
    Ok(rec + beta * kl_divergence(mu, log_var))
}

/// Pulls codes of the same pose label together and pushes codes of other
/// labels at least `margin` apart.
#[allow(clippy::too_many_arguments)]
pub fn latent_contrastive(
    phi: &[f64],
    phi_pos: &[f64],
    phi_neg: &[f64],
    u: usize,
    u_pos: usize,
    u_neg: usize,
    margin: f64,
) -> Result<f64> {
    check_triple_labels(&u, &u_pos, &u_neg)?;
    margin_contrastive(phi, phi_pos, phi_neg, margin)
}

/// Tape form over rows of three `N x latent` variables.
pub fn latent_contrastive_var(tape: &mut Tape, phi: Var, pos: Var, neg: Var, margin: f64) -> Var {
    margin_contrastive_var(tape, phi, pos, neg, margin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn tiny() -> Vae {
        Vae::new(VaeConfig {
            height: 8,
            width: 8,
            channels: vec![2, 2],
            latent_dim: 3,
            beta: 1.0,
            seed: 5,
        })
        .unwrap()
    }

    fn blob(h: usize, w: usize) -> Heatmap {
        let g = Array2::from_shape_fn((h, w), |(y, x)| (-((x as f64 - 3.0).powi(2) + (y as f64 - 4.0).powi(2)) / 4.0).exp());
        Heatmap::new(g, HeatmapSource::DetectorOutput)
    }

    #[test]
    fn default_code_is_64_wide() {
        let v = Vae::new(VaeConfig::default()).unwrap();
        let c = v.encode(&blob(32, 32)).unwrap();
        assert_eq!(c.phi.len(), 64);
        assert_eq!(v.encode(&blob(32, 32)).unwrap(), c);
    }

    #[test]
    fn decode_is_a_probability_map() {
        let v = tiny();
        let h = v.decode(&[0.3, -2.0, 1.0]).unwrap();
        assert_eq!(h.grid.dim(), (8, 8));
        assert!(h.grid.iter().all(|&p| (0.0..=1.0).contains(&p)));
        assert_eq!(v.decode(&[0.3, -2.0, 1.0]).unwrap(), h);
        assert!(v.decode(&[0.0; 4]).is_err());
    }

    #[test]
    fn wrong_size_is_rejected() {
        assert!(tiny().encode(&blob(6, 8)).is_err());
    }

    #[test]
    fn kl_closed_form_values() {
        assert_eq!(kl_divergence(&[0.0; 64], &[0.0; 64]), 0.0);
        assert!((kl_divergence(&[1.0; 64], &[0.0; 64]) - 32.0).abs() < 1e-12);
    }

    #[test]
    fn tape_elbo_matches_pure_elbo() {
        let v = tiny();
        let x = blob(8, 8);
        let eps = [0.2, -0.4, 1.1];
        let mut t = Tape::new();
        let input = t.constant(x.to_rows());
        let l = v.elbo_var(&mut t, input, &x, &eps).unwrap();
        let code = v.encode(&x).unwrap();
        let recon = v.decode(&reparameterize(&code.mu, &code.log_var, &eps)).unwrap();
        let want = elbo_loss(&recon, &x, &code.mu, &code.log_var, 1.0).unwrap();
        assert!((t.scalar(l) - want).abs() < 1e-8 * want.abs().max(1.0));
    }
}
