//! Dual variational generation: two modality encoders share a joint
//! decoder that emits both images of a pair from one latent, a pair-level
//! discriminator keeps outputs on the data manifold, and a frozen identity
//! feature extractor supplies the identity-preserving pressure.
//!
//! New pairs come from copying one Gaussian noise vector into both latent
//! slots before decoding, so the two modalities of a generated pair share
//! their identity by construction.

use serde::Serialize;

use crate::error::{require_finite, TrainError};
use crate::nn::{center_pixels, Activation, BoundMlp, LayerSpec, Mlp, Optimizer};
use crate::rng::RandomSource;
use crate::synthdata::PairRecord;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const LEAKY_SLOPE: f64 = 0.2;
/// Probability clamp applied before every discriminator log.
const PROB_EPS: f64 = 1e-6;
/// Denominator floor in the diversity ratio.
const DIV_EPS: f64 = 1e-5;

/// Scale factors of the generator objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub dist: f64,
    pub ip_pair: f64,
    pub ip_rec: f64,
    pub div: f64,
    /// Diversity ratio clip.
    pub div_clip: f64,
    /// Adversarial term scale; 0 disables the discriminator game.
    pub adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { dist: 50.0, ip_pair: 5.0, ip_rec: 1000.0, div: 0.2, div_clip: 5.0, adv: 1.0 }
    }
}

/// Per-sample Gaussian posterior of one modality: mean and log-variance
/// rows of shape `[batch, d]`.
#[derive(Clone, Copy)]
pub struct Latent<'t> {
    pub mean: Var<'t>,
    pub log_var: Var<'t>,
}

impl<'t> Latent<'t> {
    pub fn sigma(self) -> Var<'t> {
        self.log_var.mul_scalar(0.5).exp()
    }
}

/// The generation model: encoders, decoder, discriminator, weights.
#[derive(Clone, Debug)]
pub struct GeneratorBundle {
    pub encoder_n: Mlp,
    pub encoder_v: Mlp,
    pub decoder: Mlp,
    pub discriminator: Mlp,
    pub latent_dim: usize,
    pub image_dim: usize,
    pub weights: LossWeights,
}

fn leaky(fan_out: usize) -> LayerSpec {
    LayerSpec::plain(fan_out, Activation::LeakyRelu(LEAKY_SLOPE))
}

impl GeneratorBundle {
    /// Full-scale model: encoders 1024→256→128→2d, decoder 2d→128→256→2·1024
    /// (sigmoid), discriminator 2·1024→256→64→1 (logit output).
    pub fn new(image_dim: usize, latent_dim: usize, rng: &mut RandomSource) -> Self {
        Self::with_dims(
            image_dim,
            latent_dim,
            (256, 128),
            (128, 256),
            (256, 64),
            LossWeights::default(),
            rng,
        )
    }

    /// Fully parameterized constructor; small dims keep gradient checks fast.
    pub fn with_dims(
        image_dim: usize,
        latent_dim: usize,
        enc_hidden: (usize, usize),
        dec_hidden: (usize, usize),
        disc_hidden: (usize, usize),
        weights: LossWeights,
        rng: &mut RandomSource,
    ) -> Self {
        let enc_spec = [
            leaky(enc_hidden.0),
            leaky(enc_hidden.1),
            LayerSpec::plain(2 * latent_dim, Activation::Linear),
        ];
        let encoder_n = Mlp::new(image_dim, &enc_spec, rng);
        let encoder_v = Mlp::new(image_dim, &enc_spec, rng);
        let decoder = Mlp::new(
            2 * latent_dim,
            &[
                leaky(dec_hidden.0),
                leaky(dec_hidden.1),
                LayerSpec::plain(2 * image_dim, Activation::Sigmoid),
            ],
            rng,
        );
        let discriminator = Mlp::new(
            2 * image_dim,
            &[
                leaky(disc_hidden.0),
                leaky(disc_hidden.1),
                LayerSpec::plain(1, Activation::Linear),
            ],
            rng,
        );
        GeneratorBundle {
            encoder_n,
            encoder_v,
            decoder,
            discriminator,
            latent_dim,
            image_dim,
            weights,
        }
    }

    /// Generator-side parameters (encoders + decoder) in fixed order.
    pub fn gen_named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.encoder_n.named_params("encoder_n");
        out.extend(self.encoder_v.named_params("encoder_v"));
        out.extend(self.decoder.named_params("decoder"));
        out
    }

    pub fn gen_named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.encoder_n.named_params_mut("encoder_n");
        out.extend(self.encoder_v.named_params_mut("encoder_v"));
        out.extend(self.decoder.named_params_mut("decoder"));
        out
    }

    pub fn disc_named_params(&self) -> Vec<(String, &Tensor)> {
        self.discriminator.named_params("discriminator")
    }

    pub fn disc_named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.discriminator.named_params_mut("discriminator")
    }

    /// All parameters, generator first, for checkpointing.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.gen_named_params();
        out.extend(self.disc_named_params());
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.encoder_n.named_params_mut("encoder_n");
        out.extend(self.encoder_v.named_params_mut("encoder_v"));
        out.extend(self.decoder.named_params_mut("decoder"));
        out.extend(self.discriminator.named_params_mut("discriminator"));
        out
    }

    pub fn gen_param_sizes(&self) -> Vec<usize> {
        self.gen_named_params().iter().map(|(_, t)| t.numel()).collect()
    }

    pub fn disc_param_sizes(&self) -> Vec<usize> {
        self.disc_named_params().iter().map(|(_, t)| t.numel()).collect()
    }
}

/// Frozen identity feature extractor: a classifier trunk whose unit-norm
/// embedding scores identity preservation. Never receives gradients.
#[derive(Clone, Debug)]
pub struct FipHandle {
    pub trunk: Mlp,
}

impl FipHandle {
    pub fn feature_dim(&self) -> usize {
        self.trunk.output_dim()
    }

    /// Bind the trunk onto a tape as constants and return the feature map.
    /// The trunk sees centered pixels, matching how it was trained.
    pub fn bind<'t>(&self, tape: &'t Tape) -> impl Fn(Var<'t>) -> Var<'t> {
        let bound = self.trunk.bind(tape, false);
        move |x: Var<'t>| bound.forward(center_pixels(x)).normalize_rows()
    }

    /// Features of a raw batch, no gradients: `[B, 1024] -> [B, dim]`.
    pub fn features_tensor(&self, x: &Tensor) -> Tensor {
        let tape = Tape::new();
        let bound = self.trunk.bind(&tape, false);
        let xv = tape.constant(x.clone());
        bound.forward(center_pixels(xv)).normalize_rows().value()
    }
}

/// Split an encoder output into mean and log-variance halves.
pub fn encode<'t>(encoder: &BoundMlp<'t>, x: Var<'t>, latent_dim: usize) -> Latent<'t> {
    let out = encoder.forward(x);
    Latent {
        mean: out.slice(1, 0, latent_dim),
        log_var: out.slice(1, latent_dim, latent_dim),
    }
}

/// z = u + exp(log_var / 2) ⊙ ε. Gradient reaches u and log_var; ε is data.
pub fn reparameterize<'t>(lat: Latent<'t>, eps: Var<'t>) -> Var<'t> {
    lat.mean + lat.sigma().hadamard(eps)
}

/// Decode a joint latent into the two modality images.
pub fn decode<'t>(decoder: &BoundMlp<'t>, z_joint: Var<'t>, image_dim: usize) -> (Var<'t>, Var<'t>) {
    let out = decoder.forward(z_joint);
    (out.slice(1, 0, image_dim), out.slice(1, image_dim, image_dim))
}

fn batch_rows(v: Var<'_>) -> f64 {
    v.shape()[0] as f64
}

fn kl_one<'t>(lat: Latent<'t>) -> Var<'t> {
    let b = batch_rows(lat.mean);
    (lat.mean.square() + lat.log_var.exp() - lat.log_var)
        .add_scalar(-1.0)
        .sum_all()
        .mul_scalar(0.5 / b)
}

/// Both posteriors against the standard normal prior, batch-averaged.
pub fn loss_kl<'t>(lat_n: Latent<'t>, lat_v: Latent<'t>) -> Var<'t> {
    kl_one(lat_n) + kl_one(lat_v)
}

/// Half squared pixel error of both reconstructions, batch-averaged.
pub fn loss_rec<'t>(
    x_n: Var<'t>,
    x_v: Var<'t>,
    recon_n: Var<'t>,
    recon_v: Var<'t>,
) -> Var<'t> {
    let b = batch_rows(x_n);
    ((x_n - recon_n).square().sum_all() + (x_v - recon_v).square().sum_all())
        .mul_scalar(0.5 / b)
}

/// Squared 2-Wasserstein distance between the two diagonal posteriors:
/// 0.5·(‖u_N − u_V‖² + ‖σ_N − σ_V‖²), batch-averaged.
pub fn loss_dist<'t>(lat_n: Latent<'t>, lat_v: Latent<'t>) -> Var<'t> {
    let b = batch_rows(lat_n.mean);
    ((lat_n.mean - lat_v.mean).square().sum_all()
        + (lat_n.sigma() - lat_v.sigma()).square().sum_all())
    .mul_scalar(0.5 / b)
}

/// Feature distance between the two reconstructed modalities.
pub fn loss_ip_pair<'t, F>(recon_n: Var<'t>, recon_v: Var<'t>, fip: &F) -> Var<'t>
where
    F: Fn(Var<'t>) -> Var<'t>,
{
    let b = batch_rows(recon_n);
    (fip(recon_n) - fip(recon_v)).square().sum_all().mul_scalar(1.0 / b)
}

/// Feature drift of each reconstruction from its source image.
pub fn loss_ip_rec<'t, F>(
    x_n: Var<'t>,
    x_v: Var<'t>,
    recon_n: Var<'t>,
    recon_v: Var<'t>,
    fip: &F,
) -> Var<'t>
where
    F: Fn(Var<'t>) -> Var<'t>,
{
    let b = batch_rows(x_n);
    ((fip(recon_n) - fip(x_n)).square().sum_all()
        + (fip(recon_v) - fip(x_v)).square().sum_all())
    .mul_scalar(1.0 / b)
}

/// Diversity pressure from two noise draws decoded side by side: the
/// per-sample ratio of feature movement (L1, both modalities) to latent
/// movement (L1, floored), clipped at `clip`; contributes its negated
/// batch mean so the generator maximizes diversity up to the clip.
pub fn loss_div<'t, F>(
    pair1: (Var<'t>, Var<'t>),
    pair2: (Var<'t>, Var<'t>),
    z1: Var<'t>,
    z2: Var<'t>,
    clip: f64,
    fip: &F,
) -> Var<'t>
where
    F: Fn(Var<'t>) -> Var<'t>,
{
    let numer = (fip(pair1.0) - fip(pair2.0)).l1_norm_rows()
        + (fip(pair1.1) - fip(pair2.1)).l1_norm_rows();
    let denom = (z1 - z2).l1_norm_rows().add_scalar(DIV_EPS);
    (numer / denom).min_scalar(clip).mean_all().mul_scalar(-1.0)
}

/// Discriminator belief that a 2048-dim concatenated pair is real,
/// clamped away from {0, 1} so the logs below stay finite.
pub fn disc_prob<'t>(disc: &BoundMlp<'t>, pair: Var<'t>) -> Var<'t> {
    disc.forward(pair).sigmoid().clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Non-saturating discriminator objective over one real and two fake
/// sources (reconstructions and noise samples), batch-averaged.
pub fn loss_adv_disc<'t>(p_real: Var<'t>, p_recon: Var<'t>, p_sampled: Var<'t>) -> Var<'t> {
    let b = batch_rows(p_real);
    let fake = |p: Var<'t>| {
        p.mul_scalar(-1.0)
            .add_scalar(1.0)
            .log()
            .sum_all()
            .mul_scalar(-0.5 / b)
    };
    p_real.log().sum_all().mul_scalar(-1.0 / b) + fake(p_recon) + fake(p_sampled)
}

/// Non-saturating generator objective on the same two fake sources.
pub fn loss_adv_gen<'t>(p_recon: Var<'t>, p_sampled: Var<'t>) -> Var<'t> {
    let b = batch_rows(p_recon);
    let term = |p: Var<'t>| p.log().sum_all().mul_scalar(-0.5 / b);
    term(p_recon) + term(p_sampled)
}

/// Weighted total generator objective.
#[allow(clippy::too_many_arguments)]
pub fn loss_gen<'t>(
    w: &LossWeights,
    rec: Var<'t>,
    kl: Var<'t>,
    adv_gen: Var<'t>,
    dist: Var<'t>,
    ip_pair: Var<'t>,
    ip_rec: Var<'t>,
    div_contribution: Var<'t>,
) -> Var<'t> {
    rec + kl
        + adv_gen.mul_scalar(w.adv)
        + dist.mul_scalar(w.dist)
        + ip_pair.mul_scalar(w.ip_pair)
        + ip_rec.mul_scalar(w.ip_rec)
        + div_contribution.mul_scalar(w.div)
}

/// Component values of one training step.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct DvgLossReport {
    pub total: f64,
    pub rec: f64,
    pub kl: f64,
    pub dist: f64,
    pub ip_pair: f64,
    pub ip_rec: f64,
    /// Contribution of the diversity term (−min(ratio, clip), averaged).
    pub div: f64,
    pub adv_gen: f64,
    pub adv_disc: f64,
}

/// One discriminator update followed by one generator update on the same
/// batch. Noise is drawn once per step (ε_N, ε_V, z₁, z₂ in that order)
/// and shared by both phases, so fakes in the two phases coincide.
pub fn train_dvg_step(
    bundle: &mut GeneratorBundle,
    fip: &FipHandle,
    x_n: &Tensor,
    x_v: &Tensor,
    opt_gen: &mut Optimizer,
    opt_disc: &mut Optimizer,
    rng: &mut RandomSource,
) -> Result<DvgLossReport, TrainError> {
    let b = x_n.shape()[0];
    assert_eq!(x_v.shape()[0], b, "modality batches must align");
    let d = bundle.latent_dim;
    let draw = |rng: &mut RandomSource| {
        let mut data = vec![0.0; b * d];
        rng.fill_normal(&mut data);
        Tensor::new(&[b, d], data)
    };
    let eps_n = draw(rng);
    let eps_v = draw(rng);
    let z1 = draw(rng);
    let z2 = draw(rng);
    let w = bundle.weights;

    let adv_disc = if w.adv > 0.0 {
        // Discriminator phase: generator weights frozen as constants.
        let tape = Tape::new();
        let enc_n = bundle.encoder_n.bind(&tape, false);
        let enc_v = bundle.encoder_v.bind(&tape, false);
        let dec = bundle.decoder.bind(&tape, false);
        let disc = bundle.discriminator.bind(&tape, true);
        let xn = tape.constant(x_n.clone());
        let xv = tape.constant(x_v.clone());
        let zn = reparameterize(encode(&enc_n, xn, d), tape.constant(eps_n.clone()));
        let zv = reparameterize(encode(&enc_v, xv, d), tape.constant(eps_v.clone()));
        let (recon_n, recon_v) = decode(&dec, zn.concat(zv, 1), bundle.image_dim);
        let z1_const = tape.constant(z1.clone());
        let (samp_n, samp_v) = decode(&dec, z1_const.concat(z1_const, 1), bundle.image_dim);
        let p_real = disc_prob(&disc, xn.concat(xv, 1));
        let p_recon = disc_prob(&disc, recon_n.concat(recon_v, 1));
        let p_sampled = disc_prob(&disc, samp_n.concat(samp_v, 1));
        let dl = loss_adv_disc(p_real, p_recon, p_sampled);
        let value = require_finite("adv_disc", dl.item())?;
        let grads = tape.backward(dl)?;
        let vars = disc.param_vars();
        let grad_refs: Vec<Option<&Tensor>> = vars.iter().map(|v| grads.wrt_ref(*v)).collect();
        opt_disc.step(&mut bundle.disc_named_params_mut(), &grad_refs)?;
        value
    } else {
        0.0
    };

    // Generator phase: discriminator and feature extractor are constants.
    let tape = Tape::new();
    let enc_n = bundle.encoder_n.bind(&tape, true);
    let enc_v = bundle.encoder_v.bind(&tape, true);
    let dec = bundle.decoder.bind(&tape, true);
    let fmap = fip.bind(&tape);
    let xn = tape.constant(x_n.clone());
    let xv = tape.constant(x_v.clone());
    let lat_n = encode(&enc_n, xn, d);
    let lat_v = encode(&enc_v, xv, d);
    let zn = reparameterize(lat_n, tape.constant(eps_n));
    let zv = reparameterize(lat_v, tape.constant(eps_v));
    let (recon_n, recon_v) = decode(&dec, zn.concat(zv, 1), bundle.image_dim);
    let z1_const = tape.constant(z1.clone());
    let z2_const = tape.constant(z2);
    let (samp1_n, samp1_v) = decode(&dec, z1_const.concat(z1_const, 1), bundle.image_dim);
    let (samp2_n, samp2_v) = decode(&dec, z2_const.concat(z2_const, 1), bundle.image_dim);

    let rec = loss_rec(xn, xv, recon_n, recon_v);
    let kl = loss_kl(lat_n, lat_v);
    let dist = loss_dist(lat_n, lat_v);
    let ip_pair = loss_ip_pair(recon_n, recon_v, &fmap);
    let ip_rec = loss_ip_rec(xn, xv, recon_n, recon_v, &fmap);
    let div = loss_div(
        (samp1_n, samp1_v),
        (samp2_n, samp2_v),
        z1_const,
        z2_const,
        w.div_clip,
        &fmap,
    );
    let adv_gen = if w.adv > 0.0 {
        let disc = bundle.discriminator.bind(&tape, false);
        let p_recon = disc_prob(&disc, recon_n.concat(recon_v, 1));
        let p_sampled = disc_prob(&disc, samp1_n.concat(samp1_v, 1));
        loss_adv_gen(p_recon, p_sampled)
    } else {
        tape.scalar(0.0)
    };
    let total = loss_gen(&w, rec, kl, adv_gen, dist, ip_pair, ip_rec, div);

    let report = DvgLossReport {
        total: require_finite("total", total.item())?,
        rec: require_finite("rec", rec.item())?,
        kl: require_finite("kl", kl.item())?,
        dist: require_finite("dist", dist.item())?,
        ip_pair: require_finite("ip_pair", ip_pair.item())?,
        ip_rec: require_finite("ip_rec", ip_rec.item())?,
        div: require_finite("div", div.item())?,
        adv_gen: require_finite("adv_gen", adv_gen.item())?,
        adv_disc,
    };

    let grads = tape.backward(total)?;
    let mut vars = enc_n.param_vars();
    vars.extend(enc_v.param_vars());
    vars.extend(dec.param_vars());
    let grad_refs: Vec<Option<&Tensor>> = vars.iter().map(|v| grads.wrt_ref(*v)).collect();
    opt_gen.step(&mut bundle.gen_named_params_mut(), &grad_refs)?;
    Ok(report)
}

/// Decode `count` pairs from copied standard-normal noise. Each draw uses
/// its own derived stream, so the output bytes depend only on (rng seed,
/// draw index), never on batching.
pub fn sample_pairs(bundle: &GeneratorBundle, count: usize, rng: &RandomSource) -> Vec<PairRecord> {
    let d = bundle.latent_dim;
    let mut out = Vec::with_capacity(count);
    let mut start = 0usize;
    while start < count {
        let chunk = (count - start).min(128);
        let mut z = vec![0.0; chunk * d];
        for i in 0..chunk {
            let mut stream = rng.derive(&format!("draw/{}", start + i));
            stream.fill_normal(&mut z[i * d..(i + 1) * d]);
        }
        let tape = Tape::new();
        let dec = bundle.decoder.bind(&tape, false);
        let zv = tape.constant(Tensor::new(&[chunk, d], z));
        let (gen_n, gen_v) = decode(&dec, zv.concat(zv, 1), bundle.image_dim);
        let (gen_n, gen_v) = (gen_n.value(), gen_v.value());
        for i in 0..chunk {
            out.push(PairRecord {
                identity: (start + i) as u32,
                n: gen_n.row(i).to_vec(),
                v: gen_v.row(i).to_vec(),
            });
        }
        start += chunk;
    }
    out
}
