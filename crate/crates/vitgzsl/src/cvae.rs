//! Conditional VAE over assembled image features. The encoder maps a feature
//! concatenated with its class attribute to a diagonal Gaussian in latent
//! space; the decoder maps a latent sample concatenated with the attribute
//! back to feature space. After training on seen classes only, unseen-class
//! features are synthesized by decoding z ~ N(0, I) with unseen attributes.
//!
//!   z = mu + exp(log_var / 2) * eps,    eps ~ N(0, I)
//!   ELBO = MSE(x, x_hat) + 0.5 * sum(mu^2 + sigma^2 - 1 - log sigma^2)

use crate::aam::seen_index_map;
use crate::error::{Error, Result};
use crate::f2a::{AttributeKind, AttributeVector};
use crate::params::{Adam, ParamId, ParamStore};
use crate::rng::{self, Rng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const CVAE_LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct CvaeConfig {
    pub feat_dim: usize,
    pub attr_dim: usize,
    pub hidden: usize,
    pub z_dim: usize,
}

impl CvaeConfig {
    pub fn new(feat_dim: usize, attr_dim: usize) -> Self {
        CvaeConfig { feat_dim, attr_dim, hidden: 256, z_dim: 16 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feat_dim == 0 || self.attr_dim == 0 || self.hidden == 0 || self.z_dim == 0 {
            return Err(Error::ShapeMismatch("cvae dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Diagonal Gaussian with covariance parameterized in log space.
#[derive(Debug, Clone)]
pub struct LatentGaussian {
    pub mu: Tensor,
    pub log_var: Tensor,
}

impl LatentGaussian {
    pub fn z_dim(&self) -> usize {
        self.mu.cols()
    }
}

/// KL(N(mu, diag(exp(log_var))) || N(0, I)), summed over dimensions:
/// 0.5 * sum(mu^2 + sigma^2 - 1 - log sigma^2).
pub fn kl_to_standard_normal(g: &LatentGaussian) -> f64 {
    g.mu.as_slice()
        .iter()
        .zip(g.log_var.as_slice())
        .map(|(&m, &lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum()
}

#[derive(Debug, Clone, Copy)]
pub struct CvaeTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for CvaeTrainConfig {
    fn default() -> Self {
        CvaeTrainConfig { epochs: 150, lr: 1e-3, batch_size: 32 }
    }
}

fn hcat(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rows() != b.rows() {
        return Err(Error::ShapeMismatch(format!(
            "cannot concatenate {:?} with {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (ca, cb) = (a.cols(), b.cols());
    let mut out = Tensor::zeros(&[a.rows(), ca + cb]);
    for r in 0..a.rows() {
        out.as_mut_slice()[r * (ca + cb)..r * (ca + cb) + ca].copy_from_slice(a.row_slice(r));
        out.as_mut_slice()[r * (ca + cb) + ca..(r + 1) * (ca + cb)].copy_from_slice(b.row_slice(r));
    }
    Ok(out)
}

pub struct Cvae {
    pub cfg: CvaeConfig,
    store: ParamStore,
    we: ParamId,
    be: ParamId,
    wmu: ParamId,
    bmu: ParamId,
    wlv: ParamId,
    blv: ParamId,
    wd: ParamId,
    bd: ParamId,
    wx: ParamId,
    bx: ParamId,
    trained: bool,
}

#[derive(Clone, Copy)]
pub struct CvaeBound {
    we: Var,
    be: Var,
    wmu: Var,
    bmu: Var,
    wlv: Var,
    blv: Var,
    wd: Var,
    bd: Var,
    wx: Var,
    bx: Var,
}

impl CvaeBound {
    /// Rebuild from vars in registration order
    /// (we, be, wmu, bmu, wlv, blv, wd, bd, wx, bx).
    pub fn from_vars(vars: &[Var]) -> Self {
        CvaeBound {
            we: vars[0],
            be: vars[1],
            wmu: vars[2],
            bmu: vars[3],
            wlv: vars[4],
            blv: vars[5],
            wd: vars[6],
            bd: vars[7],
            wx: vars[8],
            bx: vars[9],
        }
    }
}

impl Cvae {
    pub fn new(cfg: CvaeConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let (d, a, h, z) = (cfg.feat_dim, cfg.attr_dim, cfg.hidden, cfg.z_dim);
        let we = store.add("we", rng::trunc_normal_tensor(&[d + a, h], 0.02, rng));
        let be = store.add("be", Tensor::zeros(&[1, h]));
        let wmu = store.add("wmu", rng::trunc_normal_tensor(&[h, z], 0.02, rng));
        let bmu = store.add("bmu", Tensor::zeros(&[1, z]));
        let wlv = store.add("wlv", rng::trunc_normal_tensor(&[h, z], 0.02, rng));
        let blv = store.add("blv", Tensor::zeros(&[1, z]));
        let wd = store.add("wd", rng::trunc_normal_tensor(&[z + a, h], 0.02, rng));
        let bd = store.add("bd", Tensor::zeros(&[1, h]));
        let wx = store.add("wx", rng::trunc_normal_tensor(&[h, d], 0.02, rng));
        let bx = store.add("bx", Tensor::zeros(&[1, d]));
        Ok(Cvae { cfg, store, we, be, wmu, bmu, wlv, blv, wd, bd, wx, bx, trained: false })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    /// Force the trained flag, for models restored from saved weights.
    pub fn mark_trained(&mut self) {
        self.trained = true;
    }

    pub fn bind(&self, tape: &mut Tape) -> CvaeBound {
        let mut get = |id: ParamId| tape.watch(id, self.store.value(id));
        CvaeBound {
            we: get(self.we),
            be: get(self.be),
            wmu: get(self.wmu),
            bmu: get(self.bmu),
            wlv: get(self.wlv),
            blv: get(self.blv),
            wd: get(self.wd),
            bd: get(self.bd),
            wx: get(self.wx),
            bx: get(self.bx),
        }
    }

    /// Tape-level encoder: [B x (d+a)] -> (mu, log_var), both [B x z].
    pub fn encode_on(&self, tape: &mut Tape, bound: &CvaeBound, xa: Var) -> Result<(Var, Var)> {
        let h = tape.linear(xa, bound.we, bound.be)?;
        let h = tape.leaky_relu(h, CVAE_LEAKY_SLOPE);
        let mu = tape.linear(h, bound.wmu, bound.bmu)?;
        let lv = tape.linear(h, bound.wlv, bound.blv)?;
        Ok((mu, lv))
    }

    /// Tape-level decoder: [B x (z+a)] -> [B x d].
    pub fn decode_on(&self, tape: &mut Tape, bound: &CvaeBound, za: Var) -> Result<Var> {
        let h = tape.linear(za, bound.wd, bound.bd)?;
        let h = tape.leaky_relu(h, CVAE_LEAKY_SLOPE);
        tape.linear(h, bound.wx, bound.bx)
    }

    /// Tape-level ELBO over one batch with the noise sample supplied by the
    /// caller. Returns (total, recon, kl); recon is the element-mean MSE and
    /// kl the batch-mean closed form.
    pub fn elbo_on(
        &self,
        tape: &mut Tape,
        bound: &CvaeBound,
        features: &Tensor,
        attributes: &Tensor,
        eps: &Tensor,
    ) -> Result<(Var, Var, Var)> {
        let b = features.rows();
        let z = self.cfg.z_dim;
        if eps.shape() != [b, z] {
            return Err(Error::ShapeMismatch(format!(
                "noise shape {:?}, expected [{b} x {z}]",
                eps.shape()
            )));
        }
        let xa = tape.leaf(&hcat(features, attributes)?);
        let (mu, lv) = self.encode_on(tape, bound, xa)?;

        let half_lv = tape.affine(lv, 0.5, 0.0);
        let sd = tape.exp(half_lv);
        let noise = tape.leaf(eps);
        let scaled = tape.mul(sd, noise)?;
        let zvar = tape.add(mu, scaled)?;

        let attr_leaf = tape.leaf(attributes);
        let za = tape.concat_cols(&[zvar, attr_leaf])?;
        let xhat = self.decode_on(tape, bound, za)?;

        let target = tape.leaf(features);
        let recon = tape.mse_loss(xhat, target)?;

        let mu2 = tape.mul(mu, mu)?;
        let var = tape.exp(lv);
        let t = tape.add(mu2, var)?;
        let t = tape.sub(t, lv)?;
        let s = tape.sum(t);
        let kl = tape.affine(s, 0.5 / b as f64, -0.5 * z as f64);

        let total = tape.add(recon, kl)?;
        Ok((total, recon, kl))
    }

    /// Eval-mode posterior for a batch of (feature, attribute) rows.
    pub fn encode(&self, features: &Tensor, attributes: &Tensor) -> Result<LatentGaussian> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let xa = tape.leaf(&hcat(features, attributes)?);
        let (mu, lv) = self.encode_on(&mut tape, &bound, xa)?;
        let g = LatentGaussian {
            mu: tape.value(mu).clone(),
            log_var: tape.value(lv).clone(),
        };
        if !g.mu.is_finite() || !g.log_var.is_finite() {
            return Err(Error::NonFinite("cvae posterior".into()));
        }
        Ok(g)
    }

    /// Eval-mode decode of latent rows with matching attribute rows.
    pub fn decode(&self, z: &Tensor, attributes: &Tensor) -> Result<Tensor> {
        if z.cols() != self.cfg.z_dim {
            return Err(Error::ShapeMismatch(format!(
                "latent width {}, expected {}",
                z.cols(),
                self.cfg.z_dim
            )));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let za = tape.leaf(&hcat(z, attributes)?);
        let xhat = self.decode_on(&mut tape, &bound, za)?;
        Ok(tape.value(xhat).clone())
    }

    /// Eval-mode ELBO with a fresh noise draw.
    pub fn elbo_loss(&self, features: &Tensor, attributes: &Tensor, rng: &mut Rng) -> Result<f64> {
        let eps = rng::randn_tensor(&[features.rows(), self.cfg.z_dim], 1.0, rng);
        self.elbo_with_eps(features, attributes, &eps)
    }

    fn elbo_with_eps(&self, features: &Tensor, attributes: &Tensor, eps: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let (total, _, _) = self.elbo_on(&mut tape, &bound, features, attributes, eps)?;
        Ok(tape.value(total).item())
    }

    /// Decode n independent z ~ N(0, I) draws conditioned on one real
    /// unseen-class attribute. Returns [n x feat_dim].
    pub fn sample_unseen_features(
        &self,
        attr: &AttributeVector,
        n: usize,
        rng: &mut Rng,
    ) -> Result<Tensor> {
        if !self.trained {
            return Err(Error::UntrainedModel("cvae"));
        }
        if attr.kind != AttributeKind::Real {
            return Err(Error::KindMismatch(
                "feature synthesis conditions on real class attributes".into(),
            ));
        }
        if attr.len() != self.cfg.attr_dim {
            return Err(Error::ShapeMismatch(format!(
                "attribute length {}, expected {}",
                attr.len(),
                self.cfg.attr_dim
            )));
        }
        if n == 0 {
            return Ok(Tensor::zeros(&[0, self.cfg.feat_dim]));
        }
        let z = rng::randn_tensor(&[n, self.cfg.z_dim], 1.0, rng);
        let mut attrs = Tensor::zeros(&[n, self.cfg.attr_dim]);
        for r in 0..n {
            attrs.as_mut_slice()[r * attr.len()..(r + 1) * attr.len()]
                .copy_from_slice(attr.values.as_slice());
        }
        self.decode(&z, &attrs)
    }
}

/// Minibatch ELBO training on seen-class pairs only. Returns the
/// deterministic (eps = 0) full-set ELBO after each epoch.
pub fn train_cvae(
    cvae: &mut Cvae,
    features: &Tensor,
    attributes: &Tensor,
    labels: &[usize],
    seen_classes: &[usize],
    cfg: &CvaeTrainConfig,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let n = features.rows();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if attributes.rows() != n || labels.len() != n {
        return Err(Error::ShapeMismatch("training pieces differ in length".into()));
    }
    seen_index_map(labels, seen_classes)?;

    let mut adam = Adam::new(cfg.lr);
    let bs = cfg.batch_size.max(1);
    let (d, a, z) = (features.cols(), attributes.cols(), cvae.cfg.z_dim);

    let mut curve = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let order = rng::permutation(n, rng);
        for chunk in order.chunks(bs) {
            let mut x = Tensor::zeros(&[chunk.len(), d]);
            let mut at = Tensor::zeros(&[chunk.len(), a]);
            for (r, &i) in chunk.iter().enumerate() {
                x.as_mut_slice()[r * d..(r + 1) * d].copy_from_slice(features.row_slice(i));
                at.as_mut_slice()[r * a..(r + 1) * a].copy_from_slice(attributes.row_slice(i));
            }
            let eps = rng::randn_tensor(&[chunk.len(), z], 1.0, rng);

            let mut tape = Tape::new();
            let bound = cvae.bind(&mut tape);
            let (total, _, _) = cvae.elbo_on(&mut tape, &bound, &x, &at, &eps)?;
            if !tape.value(total).is_finite() {
                return Err(Error::NonFinite("cvae training loss".into()));
            }
            tape.backward(total)?;
            cvae.store_mut().absorb_grads(&tape)?;
            adam.step(cvae.store_mut())?;
        }
        let zero_eps = Tensor::zeros(&[n, z]);
        curve.push(cvae.elbo_with_eps(features, attributes, &zero_eps)?);
    }
    cvae.trained = true;
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::gradcheck;

    fn tiny_cfg() -> CvaeConfig {
        CvaeConfig { feat_dim: 6, attr_dim: 3, hidden: 5, z_dim: 2 }
    }

    fn mk(cfg: CvaeConfig, seed: u64) -> (Cvae, Rng) {
        let mut rng = rng::seeded(seed);
        let cvae = Cvae::new(cfg, &mut rng).unwrap();
        (cvae, rng)
    }

    fn zero_params(cvae: &mut Cvae) {
        let ids: Vec<ParamId> = cvae.store.ids().collect();
        for id in ids {
            let t = cvae.store.value_mut(id);
            *t = Tensor::zeros(t.shape());
        }
    }

    fn randomize_params(cvae: &mut Cvae, sigma: f64, rng: &mut Rng) {
        let ids: Vec<ParamId> = cvae.store.ids().collect();
        for id in ids {
            let shape = cvae.store.value(id).shape().to_vec();
            *cvae.store.value_mut(id) = rng::randn_tensor(&shape, sigma, rng);
        }
    }

    #[test]
    fn zero_weights_encode_to_the_unit_gaussian() {
        let (mut cvae, mut rng) = mk(tiny_cfg(), 3);
        zero_params(&mut cvae);
        let x = rng::randn_tensor(&[2, 6], 1.0, &mut rng);
        let a = rng::randn_tensor(&[2, 3], 1.0, &mut rng);
        let g = cvae.encode(&x, &a).unwrap();
        assert_eq!(g.mu.shape(), &[2, 2]);
        assert_eq!(g.log_var.shape(), &[2, 2]);
        assert!(g.mu.as_slice().iter().all(|&v| v == 0.0));
        assert!(g.log_var.as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(kl_to_standard_normal(&g), 0.0);
    }

    #[test]
    fn zero_weights_decode_to_the_zero_vector() {
        let (mut cvae, mut rng) = mk(tiny_cfg(), 5);
        zero_params(&mut cvae);
        let z = rng::randn_tensor(&[3, 2], 1.0, &mut rng);
        let a = rng::randn_tensor(&[3, 3], 1.0, &mut rng);
        let x = cvae.decode(&z, &a).unwrap();
        assert_eq!(x.shape(), &[3, 6]);
        assert!(x.as_slice().iter().all(|&v| v == 0.0));
    }

    fn reparameterize(g: &LatentGaussian, rng: &mut Rng) -> Tensor {
        let mut z = g.mu.clone();
        for (zi, lv) in z.as_mut_slice().iter_mut().zip(g.log_var.as_slice()) {
            *zi += (lv / 2.0).exp() * rng::randn(rng);
        }
        z
    }

    #[test]
    fn tiny_variance_collapses_the_sample_onto_the_mean() {
        let mut rng = rng::seeded(7);
        let g = LatentGaussian {
            mu: rng::randn_tensor(&[1, 4], 1.0, &mut rng),
            log_var: Tensor::filled(&[1, 4], -40.0),
        };
        let z = reparameterize(&g, &mut rng);
        assert!(z.max_abs_diff(&g.mu) <= 1e-8);
    }

    #[test]
    fn same_seed_reproduces_the_same_sample() {
        let g = LatentGaussian {
            mu: Tensor::row(&[0.3, -0.7]),
            log_var: Tensor::row(&[0.1, -0.4]),
        };
        let a = reparameterize(&g, &mut rng::seeded(11));
        let b = reparameterize(&g, &mut rng::seeded(11));
        assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn standard_normal_samples_have_unit_moments() {
        let g = LatentGaussian { mu: Tensor::zeros(&[1, 4]), log_var: Tensor::zeros(&[1, 4]) };
        let mut rng = rng::seeded(13);
        let trials = 10_000;
        let mut sums = [0.0f64; 4];
        let mut sq = [0.0f64; 4];
        for _ in 0..trials {
            let z = reparameterize(&g, &mut rng);
            for (j, &v) in z.as_slice().iter().enumerate() {
                sums[j] += v;
                sq[j] += v * v;
            }
        }
        for j in 0..4 {
            let mean = sums[j] / trials as f64;
            let var = sq[j] / trials as f64 - mean * mean;
            assert!(mean.abs() <= 0.05, "dim {j} mean {mean}");
            assert!((0.9..=1.1).contains(&var), "dim {j} variance {var}");
        }
    }

    #[test]
    fn unit_mean_single_dim_kl_is_exactly_half() {
        let g = LatentGaussian { mu: Tensor::row(&[1.0]), log_var: Tensor::row(&[0.0]) };
        assert!((kl_to_standard_normal(&g) - 0.5).abs() <= 1e-15);
    }

    /// Simpson integration of p(x) ln(p(x)/q(x)) per dimension.
    fn kl_by_integration(g: &LatentGaussian) -> f64 {
        let mut total = 0.0;
        for (&mu, &lv) in g.mu.as_slice().iter().zip(g.log_var.as_slice()) {
            let sd = (lv / 2.0).exp();
            let lo = mu - 15.0 * sd.max(1.0);
            let hi = mu + 15.0 * sd.max(1.0);
            let steps = 40_000usize;
            let h = (hi - lo) / steps as f64;
            let f = |x: f64| {
                let lp = -0.5 * ((x - mu) / sd).powi(2) - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
                let lq = -0.5 * x * x - 0.5 * (2.0 * std::f64::consts::PI).ln();
                lp.exp() * (lp - lq)
            };
            let mut acc = f(lo) + f(hi);
            for i in 1..steps {
                let w = if i % 2 == 1 { 4.0 } else { 2.0 };
                acc += w * f(lo + i as f64 * h);
            }
            total += acc * h / 3.0;
        }
        total
    }

    #[test]
    fn closed_form_kl_matches_numerical_integration() {
        let mut rng = rng::seeded(17);
        for _ in 0..20 {
            let z = 1 + rng::below(&mut rng, 3);
            let g = LatentGaussian {
                mu: rng::randn_tensor(&[1, z], 1.0, &mut rng),
                log_var: rng::randn_tensor(&[1, z], 0.8, &mut rng),
            };
            let closed = kl_to_standard_normal(&g);
            let numeric = kl_by_integration(&g);
            assert!(
                (closed - numeric).abs() <= 1e-4,
                "closed {closed} vs integrated {numeric}"
            );
        }
    }

    #[test]
    fn kl_is_never_negative() {
        let mut rng = rng::seeded(19);
        for _ in 0..100 {
            let g = LatentGaussian {
                mu: rng::randn_tensor(&[1, 5], 2.0, &mut rng),
                log_var: rng::randn_tensor(&[1, 5], 1.5, &mut rng),
            };
            assert!(kl_to_standard_normal(&g) >= -1e-9);
        }
    }

    #[test]
    fn elbo_splits_into_reconstruction_plus_kl() {
        let (cvae, mut rng) = mk(tiny_cfg(), 21);
        let x = rng::randn_tensor(&[3, 6], 1.0, &mut rng);
        let a = rng::randn_tensor(&[3, 3], 1.0, &mut rng);
        let eps = rng::randn_tensor(&[3, 2], 1.0, &mut rng);
        let mut tape = Tape::new();
        let bound = cvae.bind(&mut tape);
        let (total, recon, kl) = cvae.elbo_on(&mut tape, &bound, &x, &a, &eps).unwrap();
        let (t, r, k) =
            (tape.value(total).item(), tape.value(recon).item(), tape.value(kl).item());
        assert!((t - (r + k)).abs() <= 1e-12);
        assert!(r >= 0.0);
        assert!(k >= -1e-9);
    }

    #[test]
    fn batch_mean_kl_matches_per_row_closed_form() {
        let (cvae, mut rng) = mk(tiny_cfg(), 23);
        let x = rng::randn_tensor(&[4, 6], 1.0, &mut rng);
        let a = rng::randn_tensor(&[4, 3], 1.0, &mut rng);
        let eps = Tensor::zeros(&[4, 2]);
        let mut tape = Tape::new();
        let bound = cvae.bind(&mut tape);
        let (_, _, kl) = cvae.elbo_on(&mut tape, &bound, &x, &a, &eps).unwrap();
        let g = cvae.encode(&x, &a).unwrap();
        let mut want = 0.0;
        for r in 0..4 {
            let row = LatentGaussian {
                mu: Tensor::row(g.mu.row_slice(r)),
                log_var: Tensor::row(g.log_var.row_slice(r)),
            };
            want += kl_to_standard_normal(&row) / 4.0;
        }
        assert!((tape.value(kl).item() - want).abs() <= 1e-10);
    }

    #[test]
    fn elbo_gradient_passes_finite_difference_check() {
        let (mut cvae, mut rng) = mk(tiny_cfg(), 25);
        randomize_params(&mut cvae, 0.5, &mut rng);
        let x = rng::randn_tensor(&[2, 6], 1.0, &mut rng);
        let a = rng::randn_tensor(&[2, 3], 1.0, &mut rng);
        let eps = rng::randn_tensor(&[2, 2], 1.0, &mut rng);
        let point = cvae.store.flatten();
        let err = gradcheck(
            |tape, flat| {
                let bound = CvaeBound::from_vars(&cvae.store.vars_from_flat(tape, flat)?);
                let (total, _, _) = cvae.elbo_on(tape, &bound, &x, &a, &eps)?;
                Ok(total)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "relative error {err}");
    }

    #[test]
    fn training_rejects_unseen_class_pairs() {
        let (mut cvae, mut rng) = mk(tiny_cfg(), 27);
        let x = rng::randn_tensor(&[3, 6], 1.0, &mut rng);
        let a = rng::randn_tensor(&[3, 3], 1.0, &mut rng);
        let err = train_cvae(
            &mut cvae,
            &x,
            &a,
            &[0, 5, 1],
            &[0, 1, 2],
            &CvaeTrainConfig { epochs: 1, lr: 1e-3, batch_size: 2 },
            &mut rng,
        )
        .unwrap_err();
        assert!(matches!(err, Error::UnseenClassInBatch(5)));
        assert!(!cvae.is_trained());
    }

    #[test]
    fn sampling_before_training_is_an_error() {
        let (cvae, mut rng) = mk(tiny_cfg(), 29);
        let attr = AttributeVector::real(Tensor::row(&[0.1, 0.2, 0.3])).unwrap();
        assert!(matches!(
            cvae.sample_unseen_features(&attr, 5, &mut rng),
            Err(Error::UntrainedModel("cvae"))
        ));
    }

    #[test]
    fn sampling_requires_real_attributes() {
        let (mut cvae, mut rng) = mk(tiny_cfg(), 31);
        cvae.mark_trained();
        let synth =
            AttributeVector::new(Tensor::row(&[0.1, 0.2, 0.3]), AttributeKind::Synthetic).unwrap();
        assert!(matches!(
            cvae.sample_unseen_features(&synth, 5, &mut rng),
            Err(Error::KindMismatch(_))
        ));
    }

    #[test]
    fn sampling_is_seeded_and_shaped() {
        let (mut cvae, mut rng) = mk(tiny_cfg(), 33);
        randomize_params(&mut cvae, 0.3, &mut rng);
        cvae.mark_trained();
        let attr = AttributeVector::real(Tensor::row(&[0.5, -0.2, 0.9])).unwrap();
        let empty = cvae.sample_unseen_features(&attr, 0, &mut rng).unwrap();
        assert_eq!(empty.shape(), &[0, 6]);
        let a = cvae.sample_unseen_features(&attr, 7, &mut rng::seeded(99)).unwrap();
        let b = cvae.sample_unseen_features(&attr, 7, &mut rng::seeded(99)).unwrap();
        assert_eq!(a.shape(), &[7, 6]);
        assert_eq!(a.as_slice(), b.as_slice());
        let c = cvae.sample_unseen_features(&attr, 7, &mut rng::seeded(100)).unwrap();
        assert!(a.max_abs_diff(&c) > 1e-9);
    }

    /// Clustered features with one attribute row per class. Centers are a
    /// fixed linear function of the attributes so the attribute-to-feature
    /// law extends to held-out classes.
    fn clustered(
        rng: &mut Rng,
        classes: usize,
        per_class: usize,
        d: usize,
        a: usize,
    ) -> (Tensor, Tensor, Vec<usize>, Tensor, Tensor) {
        let class_attrs = rng::randn_tensor(&[classes, a], 1.0, rng);
        let law = rng::randn_tensor(&[a, d], 1.0, rng);
        let centers = crate::tape::matmul_nn(&class_attrs, &law);
        let n = classes * per_class;
        let mut x = Tensor::zeros(&[n, d]);
        let mut at = Tensor::zeros(&[n, a]);
        let mut labels = Vec::with_capacity(n);
        for c in 0..classes {
            for s in 0..per_class {
                let i = c * per_class + s;
                for j in 0..d {
                    x.as_mut_slice()[i * d + j] = centers.get2(c, j) + 0.15 * rng::randn(rng);
                }
                at.as_mut_slice()[i * a..(i + 1) * a].copy_from_slice(class_attrs.row_slice(c));
                labels.push(c);
            }
        }
        (x, at, labels, centers, class_attrs)
    }

    #[test]
    fn training_lowers_the_elbo_and_reconstructs_below_feature_variance() {
        let mut rng = rng::seeded(35);
        let cfg = CvaeConfig { feat_dim: 8, attr_dim: 4, hidden: 32, z_dim: 4 };
        let mut cvae = Cvae::new(cfg, &mut rng).unwrap();
        let (x, at, labels, _, _) = clustered(&mut rng, 3, 20, 8, 4);

        let curve = train_cvae(
            &mut cvae,
            &x,
            &at,
            &labels,
            &[0, 1, 2],
            &CvaeTrainConfig { epochs: 120, lr: 1e-2, batch_size: 20 },
            &mut rng,
        )
        .unwrap();
        assert!(cvae.is_trained());
        assert!(
            curve.last().unwrap() < curve.first().unwrap(),
            "elbo did not fall: {:?} -> {:?}",
            curve.first(),
            curve.last()
        );

        // Posterior-mean reconstruction must beat predicting the global mean.
        let g = cvae.encode(&x, &at).unwrap();
        let xhat = cvae.decode(&g.mu, &at).unwrap();
        let mut mse = 0.0;
        for (h, v) in xhat.as_slice().iter().zip(x.as_slice()) {
            mse += (h - v) * (h - v);
        }
        mse /= x.numel() as f64;
        let mean = x.mean();
        let var = x.as_slice().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / x.numel() as f64;
        assert!(mse < var, "reconstruction mse {mse} not below feature variance {var}");
    }

    #[test]
    fn generated_unseen_means_land_nearest_their_own_class() {
        let mut rng = rng::seeded(37);
        let cfg = CvaeConfig { feat_dim: 8, attr_dim: 4, hidden: 32, z_dim: 4 };
        let mut cvae = Cvae::new(cfg, &mut rng).unwrap();
        // Six classes: train on four, hold out two.
        let (x, at, labels, centers, class_attrs) = clustered(&mut rng, 6, 20, 8, 4);
        let seen = [0usize, 1, 2, 3];
        let keep: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] < 4).collect();
        let mut xs = Tensor::zeros(&[keep.len(), 8]);
        let mut ats = Tensor::zeros(&[keep.len(), 4]);
        let mut ls = Vec::new();
        for (r, &i) in keep.iter().enumerate() {
            xs.as_mut_slice()[r * 8..(r + 1) * 8].copy_from_slice(x.row_slice(i));
            ats.as_mut_slice()[r * 4..(r + 1) * 4].copy_from_slice(at.row_slice(i));
            ls.push(labels[i]);
        }
        train_cvae(
            &mut cvae,
            &xs,
            &ats,
            &ls,
            &seen,
            &CvaeTrainConfig { epochs: 200, lr: 1e-2, batch_size: 20 },
            &mut rng,
        )
        .unwrap();

        let mut hits = 0;
        for u in 4..6 {
            let attr = AttributeVector::real(Tensor::row(class_attrs.row_slice(u))).unwrap();
            let gen = cvae.sample_unseen_features(&attr, 200, &mut rng).unwrap();
            let mut mean = vec![0.0f64; 8];
            for r in 0..gen.rows() {
                for (m, v) in mean.iter_mut().zip(gen.row_slice(r)) {
                    *m += v / gen.rows() as f64;
                }
            }
            let dist = |c: usize| -> f64 {
                centers
                    .row_slice(c)
                    .iter()
                    .zip(&mean)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            };
            let own = dist(u);
            if (0..6).filter(|&c| c != u).all(|c| own < dist(c)) {
                hits += 1;
            }
        }
        assert_eq!(hits, 2, "an unseen-class mean landed nearer a foreign center");
    }
}
