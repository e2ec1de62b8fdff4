use serde::{Deserialize, Serialize};

use crate::networks::{Avlae, Bound};
use crate::tensor::{Graph, Real, Result, Var};

/// Norm used for latent reconstruction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecNorm {
    #[default]
    SquaredL2,
    L1,
}

/// Generator objective in Step II.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GenLoss {
    /// Minimize `log(1 − σ(D(x̂)))`.
    #[default]
    Saturating,
    /// Minimize `−log σ(D(x̂))`.
    NonSaturating,
}

/// Discriminator and generator terms of one adversarial objective.
#[derive(Clone, Copy, Debug)]
pub struct AdvTerms {
    /// `mean log σ(real) + mean log(1 − σ(fake))`, to be maximized.
    pub disc: Var,
    /// `mean log(1 − σ(fake))`.
    pub gen: Var,
}

/// Builds both terms from logits `[N, 1]`, using `log(1 − σ(l)) = log σ(−l)`.
pub fn adversarial_terms<R: Real>(g: &mut Graph<R>, real_logits: Var, fake_logits: Var) -> Result<AdvTerms> {
    let real = g.log_sigmoid(real_logits);
    let real = g.mean(real);
    let neg = g.scale(fake_logits, R::c(-1.0));
    let fake = g.log_sigmoid(neg);
    let gen = g.mean(fake);
    let disc = g.add(real, gen)?;
    Ok(AdvTerms { disc, gen })
}

/// Generator objective on fake logits.
pub fn generator_objective<R: Real>(g: &mut Graph<R>, fake_logits: Var, kind: GenLoss) -> Var {
    match kind {
        GenLoss::Saturating => {
            let neg = g.scale(fake_logits, R::c(-1.0));
            let l = g.log_sigmoid(neg);
            g.mean(l)
        }
        GenLoss::NonSaturating => {
            let l = g.log_sigmoid(fake_logits);
            let m = g.mean(l);
            g.scale(m, R::c(-1.0))
        }
    }
}

/// Terms on `D_V(x, E_M(x))` for real and fake video batches.
pub fn loss_adv_video<R: Real>(
    g: &mut Graph<R>,
    model: &Avlae<R>,
    b: &Bound,
    real: Var,
    fake: Var,
) -> Result<AdvTerms> {
    let lr = model.disc_video_full(g, b, real)?;
    let lf = model.disc_video_full(g, b, fake)?;
    adversarial_terms(g, lr, lf)
}

/// Terms on `D_I(E_A(x_t))` for real and fake frame batches.
pub fn loss_adv_image<R: Real>(
    g: &mut Graph<R>,
    model: &Avlae<R>,
    b: &Bound,
    real_frame: Var,
    fake_frame: Var,
) -> Result<AdvTerms> {
    let wr = model.encode_appearance(g, b, real_frame)?;
    let lr = model.disc_image(g, b, wr)?;
    let wf = model.encode_appearance(g, b, fake_frame)?;
    let lf = model.disc_image(g, b, wf)?;
    adversarial_terms(g, lr, lf)
}

/// Per-sample distance between latent batches `[N, d]`, averaged over the batch.
pub fn latent_distance<R: Real>(g: &mut Graph<R>, target: Var, encoded: Var, norm: RecNorm) -> Result<Var> {
    let n = g.shape(target)[0];
    let diff = g.sub(target, encoded)?;
    let e = match norm {
        RecNorm::SquaredL2 => g.square(diff),
        RecNorm::L1 => g.abs(diff),
    };
    let s = g.sum(e);
    Ok(g.scale(s, R::c(1.0 / n as f64)))
}

/// Weighted reconstruction terms; a zero weight skips its term entirely.
#[derive(Clone, Copy, Debug)]
pub struct RecTerms {
    pub total: Var,
    pub motion: Option<Var>,
    pub appearance: Option<Var>,
}

/// `k1·dist(w_M, w'_M) + k2·dist(w_A, w'_A)` on already computed latents.
#[allow(clippy::too_many_arguments)]
pub fn reconstruction_terms<R: Real>(
    g: &mut Graph<R>,
    w_m: Var,
    w_m_enc: Option<Var>,
    w_a: Var,
    w_a_enc: Option<Var>,
    k1: f64,
    k2: f64,
    norm: RecNorm,
) -> Result<RecTerms> {
    let motion = match w_m_enc {
        Some(e) if k1 != 0.0 => Some(latent_distance(g, w_m, e, norm)?),
        _ => None,
    };
    let appearance = match w_a_enc {
        Some(e) if k2 != 0.0 => Some(latent_distance(g, w_a, e, norm)?),
        _ => None,
    };
    let mut total = g.constant(crate::tensor::Tensor::scalar(R::zero()));
    if let Some(m) = motion {
        let m = g.scale(m, R::c(k1));
        total = g.add(total, m)?;
    }
    if let Some(a) = appearance {
        let a = g.scale(a, R::c(k2));
        total = g.add(total, a)?;
    }
    Ok(RecTerms {
        total,
        motion,
        appearance,
    })
}

/// Full latent reconstruction from noise: `x̂ = G(F_A(z_A), F_M(z_M))`, then
/// encoders on `x̂` and `x̂_t` with per-sample 0-based frame indices.
#[allow(clippy::too_many_arguments)]
pub fn loss_rec<R: Real>(
    g: &mut Graph<R>,
    model: &Avlae<R>,
    b: &Bound,
    z_a: Var,
    z_m: Var,
    frames: &[usize],
    k1: f64,
    k2: f64,
    norm: RecNorm,
) -> Result<RecTerms> {
    let (x, w_a, w_m) = model.generate_from_noise(g, b, z_a, z_m)?;
    let w_m_enc = if k1 != 0.0 && model.config().use_motion_encoder {
        Some(model.encode_motion(g, b, x)?)
    } else {
        None
    };
    let w_a_enc = if k2 != 0.0 {
        let x_t = g.take_per_batch(x, 2, frames)?;
        Some(model.encode_appearance(g, b, x_t)?)
    } else {
        None
    };
    reconstruction_terms(g, w_m, w_m_enc, w_a, w_a_enc, k1, k2, norm)
}
