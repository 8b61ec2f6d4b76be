//! Selective style recomposition: per-sample channel statistics are compared
//! against running per-domain prototypes, and the most style-sensitive
//! channels are re-normalized towards a soft mixture of those prototypes.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Checkpoint, CustomOp, Graph, Record, Shape, Tensor, Var};

/// Lower bound on every standard deviation, in samples and prototypes alike.
pub const SIGMA_MIN: f64 = 1e-5;
/// Added to the variance before the square root.
pub const VAR_EPS: f64 = 1e-10;

/// Per-channel mean and (clamped) standard deviation of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl ChannelStats {
    pub fn channels(&self) -> usize {
        self.mu.len()
    }

    /// Componentwise average of several samples' statistics.
    pub fn mean_of(all: &[&ChannelStats]) -> Option<ChannelStats> {
        let first = all.first()?;
        let k = all.len() as f64;
        let avg = |f: fn(&ChannelStats) -> &Vec<f64>| {
            (0..first.channels())
                .map(|c| all.iter().map(|s| f(s)[c]).sum::<f64>() / k)
                .collect()
        };
        Some(ChannelStats {
            mu: avg(|s| &s.mu),
            sigma: avg(|s| &s.sigma),
        })
    }
}

/// Raw standard deviation and clamped one; the clamp zeroes its gradient.
fn sigma_of(var: f64) -> (f64, f64) {
    let raw = (var + VAR_EPS).sqrt();
    (raw, raw.max(SIGMA_MIN))
}

/// Statistics of sample `n` over each `H x W` plane (population variance).
pub fn channel_stats<T: Scalar>(x: &Tensor<T>, n: usize) -> ChannelStats {
    let s = x.shape();
    let hw = s.plane() as f64;
    let mut mu = Vec::with_capacity(s.c());
    let mut sigma = Vec::with_capacity(s.c());
    for c in 0..s.c() {
        let p = x.plane(n, c);
        let m = p.iter().map(|v| v.as_f64()).sum::<f64>() / hw;
        let var = p.iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>() / hw;
        mu.push(m);
        sigma.push(sigma_of(var).1);
    }
    ChannelStats { mu, sigma }
}

/// Running statistics of one source domain at one site.
#[derive(Clone, Debug, PartialEq)]
pub struct StylePrototype {
    pub domain: usize,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub initialized: bool,
    pub updates: u64,
}

impl StylePrototype {
    pub fn new(domain: usize, channels: usize) -> Self {
        StylePrototype {
            domain,
            mu: vec![0.0; channels],
            sigma: vec![1.0; channels],
            initialized: false,
            updates: 0,
        }
    }

    /// `p <- alpha p + (1 - alpha) s`; the first update copies `s`.
    pub fn update(&mut self, stats: &ChannelStats, alpha: f64, train: bool) -> Result<()> {
        if !train {
            return Err(Error::Invalid("style prototypes are only updated in train mode".into()));
        }
        if stats.channels() != self.mu.len() {
            return Err(Error::shape(
                "update_prototype",
                format!("{} channels into a {}-channel prototype", stats.channels(), self.mu.len()),
            ));
        }
        if self.initialized {
            for c in 0..self.mu.len() {
                self.mu[c] = alpha * self.mu[c] + (1.0 - alpha) * stats.mu[c];
                self.sigma[c] = (alpha * self.sigma[c] + (1.0 - alpha) * stats.sigma[c]).max(SIGMA_MIN);
            }
        } else {
            self.mu.clone_from(&stats.mu);
            self.sigma = stats.sigma.iter().map(|s| s.max(SIGMA_MIN)).collect();
            self.initialized = true;
        }
        self.updates += 1;
        Ok(())
    }
}

/// `KL(N(mu, sigma^2) || N(p_mu, p_sigma^2))` summed over channels.
pub fn gaussian_kl(stats: &ChannelStats, proto: &StylePrototype) -> Result<f64> {
    if !proto.initialized {
        return Err(Error::Uninitialized { op: "gaussian_kl" });
    }
    if stats.channels() != proto.mu.len() {
        return Err(Error::shape(
            "gaussian_kl",
            format!("{} vs {} channels", stats.channels(), proto.mu.len()),
        ));
    }
    Ok(kl_unchecked(stats, proto))
}

fn kl_unchecked(stats: &ChannelStats, proto: &StylePrototype) -> f64 {
    (0..stats.channels())
        .map(|c| {
            let (s, ps) = (stats.sigma[c], proto.sigma[c]);
            let d = stats.mu[c] - proto.mu[c];
            (ps / s).ln() + (s * s + d * d) / (2.0 * ps * ps) - 0.5
        })
        .sum()
}

/// `softmax(-kl)` with max-subtraction.
pub fn softmax_neg(kl: &[f64]) -> Vec<f64> {
    let lo = kl.iter().copied().fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = kl.iter().map(|k| (lo - k).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Soft domain attribution `kappa` of a sample over the prototypes.
pub fn attribution(stats: &ChannelStats, prototypes: &[StylePrototype]) -> Result<Vec<f64>> {
    if prototypes.is_empty() {
        return Err(Error::Invalid("attribution over zero prototypes".into()));
    }
    let kl = prototypes.iter().map(|p| gaussian_kl(stats, p)).collect::<Result<Vec<_>>>()?;
    Ok(softmax_neg(&kl))
}

/// Statistic used to rank channels for recomposition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Ranking {
    #[default]
    Sigma,
    Mu,
}

/// Number of channels selected out of `c` at ratio `tau`: `ceil(tau c)`,
/// at least one.
pub fn selected_count(tau: f64, c: usize) -> usize {
    ((tau * c as f64 - 1e-9).ceil() as usize).clamp(1, c)
}

/// Marks the top `ceil(tau C)` channels by the ranking statistic, descending;
/// ties go to the lower channel index.
pub fn activation_mask(stats: &ChannelStats, tau: f64, ranking: Ranking) -> Vec<bool> {
    let key = match ranking {
        Ranking::Sigma => &stats.sigma,
        Ranking::Mu => &stats.mu,
    };
    let mut order: Vec<usize> = (0..key.len()).collect();
    order.sort_by(|&a, &b| key[b].total_cmp(&key[a]).then(a.cmp(&b)));
    let mut mask = vec![false; key.len()];
    for &c in order.iter().take(selected_count(tau, key.len())) {
        mask[c] = true;
    }
    mask
}

/// Hyperparameters shared by all sites of a model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsrConfig {
    /// Fraction of channels recomposed, in `(0, 1]`.
    pub tau: f64,
    /// Residual weight on the original features, in `[0, 1]`.
    pub lambda: f64,
    /// Prototype momentum.
    pub alpha: f64,
    pub ranking: Ranking,
}

impl Default for SsrConfig {
    fn default() -> Self {
        SsrConfig {
            tau: 0.3,
            lambda: 0.3,
            alpha: 0.95,
            ranking: Ranking::Sigma,
        }
    }
}

impl SsrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Invalid(format!("tau must be in (0, 1], got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Invalid(format!("lambda must be in [0, 1], got {}", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::Invalid(format!("alpha must be in [0, 1), got {}", self.alpha)));
        }
        Ok(())
    }
}

/// One recomposition point in the encoder, with a prototype per source domain.
#[derive(Clone, Debug)]
pub struct SsrSite {
    /// 1-based encoder stage.
    pub stage: usize,
    pub prototypes: Vec<StylePrototype>,
    pub config: SsrConfig,
}

/// Everything the backward pass needs about one sample.
struct SamplePlan {
    mu: Vec<f64>,
    sigma: Vec<f64>,
    /// Whether the clamp on `sigma` was inactive (gradient flows).
    sigma_live: Vec<bool>,
    mask: Vec<bool>,
    kappa: Vec<f64>,
    target_mu: Vec<f64>,
    target_sigma: Vec<f64>,
}

struct RecomposeOp {
    input: Var,
    lambda: f64,
    /// Initialized prototypes as `(mu, sigma)`, in the order of `kappa`.
    protos: Vec<(Vec<f64>, Vec<f64>)>,
    plans: Vec<SamplePlan>,
}

impl SsrSite {
    pub fn new(stage: usize, domains: usize, channels: usize, config: SsrConfig) -> Self {
        SsrSite {
            stage,
            prototypes: (0..domains).map(|m| StylePrototype::new(m, channels)).collect(),
            config,
        }
    }

    pub fn channels(&self) -> usize {
        self.prototypes.first().map_or(0, |p| p.mu.len())
    }

    /// In train mode the prototype of each domain present in the batch is
    /// first updated with the batch mean of its samples' statistics; then
    /// every sample is recomposed. Eval mode only recomposes.
    pub fn forward<T: Scalar>(&mut self, g: &mut Graph<T>, x: Var, train: bool, domains: Option<&[usize]>) -> Result<Var> {
        let s = g.shape(x);
        if s.c() != self.channels() {
            return Err(Error::shape(
                "ssr",
                format!("site has {} channels, features have {}", self.channels(), s.c()),
            ));
        }
        let stats: Vec<ChannelStats> = (0..s.n()).map(|n| channel_stats(g.value(x), n)).collect();
        if train {
            let ids = domains.ok_or_else(|| Error::Invalid("train-mode style recomposition needs domain ids".into()))?;
            self.update_from_batch(&stats, ids)?;
            // keep prototypes representable at model precision so checkpoints restore them exactly
            for p in &mut self.prototypes {
                p.mu.iter_mut().chain(p.sigma.iter_mut()).for_each(|v| *v = T::of(*v).as_f64());
            }
        }
        let live: Vec<&StylePrototype> = self.prototypes.iter().filter(|p| p.initialized).collect();
        if live.is_empty() {
            log::warn!("style recomposition at stage {} has no initialized prototype; passing through", self.stage);
            return Ok(x);
        }
        let protos: Vec<(Vec<f64>, Vec<f64>)> = live.iter().map(|p| (p.mu.clone(), p.sigma.clone())).collect();
        let plans: Vec<SamplePlan> = (0..s.n())
            .map(|n| self.plan(g.value(x), n, &stats[n], &live))
            .collect();
        let op = RecomposeOp {
            input: x,
            lambda: self.config.lambda,
            protos,
            plans,
        };
        let value = op.apply(g.value(x));
        g.custom(Box::new(op), value)
    }

    fn update_from_batch(&mut self, stats: &[ChannelStats], ids: &[usize]) -> Result<()> {
        if ids.len() != stats.len() {
            return Err(Error::shape(
                "ssr",
                format!("{} domain ids for a batch of {}", ids.len(), stats.len()),
            ));
        }
        if let Some(&bad) = ids.iter().find(|&&m| m >= self.prototypes.len()) {
            return Err(Error::Invalid(format!(
                "domain id {bad} out of range for {} source domains",
                self.prototypes.len()
            )));
        }
        for m in 0..self.prototypes.len() {
            let mine: Vec<&ChannelStats> = ids.iter().zip(stats).filter(|(&d, _)| d == m).map(|(_, s)| s).collect();
            if let Some(avg) = ChannelStats::mean_of(&mine) {
                self.prototypes[m].update(&avg, self.config.alpha, true)?;
            }
        }
        Ok(())
    }

    fn plan<T: Scalar>(&self, x: &Tensor<T>, n: usize, stats: &ChannelStats, live: &[&StylePrototype]) -> SamplePlan {
        let hw = x.shape().plane() as f64;
        let sigma_live = (0..stats.channels())
            .map(|c| {
                let p = x.plane(n, c);
                let var = p.iter().map(|v| (v.as_f64() - stats.mu[c]).powi(2)).sum::<f64>() / hw;
                sigma_of(var).0 >= SIGMA_MIN
            })
            .collect();
        let kl: Vec<f64> = live.iter().map(|p| kl_unchecked(stats, p)).collect();
        let kappa = softmax_neg(&kl);
        let mask = activation_mask(stats, self.config.tau, self.config.ranking);
        let mix = |f: fn(&StylePrototype) -> &Vec<f64>, c: usize| -> f64 {
            live.iter().zip(&kappa).map(|(p, k)| k * f(p)[c]).sum()
        };
        let target_mu = (0..stats.channels()).map(|c| if mask[c] { mix(|p| &p.mu, c) } else { stats.mu[c] }).collect();
        let target_sigma = (0..stats.channels())
            .map(|c| if mask[c] { mix(|p| &p.sigma, c) } else { stats.sigma[c] })
            .collect();
        SamplePlan {
            mu: stats.mu.clone(),
            sigma: stats.sigma.clone(),
            sigma_live,
            mask,
            kappa,
            target_mu,
            target_sigma,
        }
    }

    /// Prototype records, initialized ones only.
    pub fn save(&self, ckpt: &mut Checkpoint) {
        for p in self.prototypes.iter().filter(|p| p.initialized) {
            let base = format!("ssr.stage{}.domain{}", self.stage, p.domain);
            ckpt.push(Record::from_slice(format!("{base}.mu"), &p.mu));
            ckpt.push(Record::from_slice(format!("{base}.sigma"), &p.sigma));
            ckpt.push(Record::from_slice(format!("{base}.updates"), &[p.updates as f64]));
        }
    }

    /// Restores prototypes present in the checkpoint; absent ones become
    /// uninitialized.
    pub fn load(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let c = self.channels();
        for p in &mut self.prototypes {
            let base = format!("ssr.stage{}.domain{}", self.stage, p.domain);
            match (ckpt.get(&format!("{base}.mu")), ckpt.get(&format!("{base}.sigma"))) {
                (Some(mu), Some(sigma)) => {
                    let (mu, sigma): (Vec<f64>, Vec<f64>) = (mu.to_vec(), sigma.to_vec());
                    if mu.len() != c || sigma.len() != c {
                        return Err(Error::Checkpoint(format!("{base}: expected {c} channels")));
                    }
                    p.mu = mu;
                    p.sigma = sigma;
                    p.initialized = true;
                    p.updates = ckpt
                        .get(&format!("{base}.updates"))
                        .and_then(|r| r.to_vec::<f64>().first().copied())
                        .unwrap_or(1.0) as u64;
                }
                _ => *p = StylePrototype::new(p.domain, c),
            }
        }
        Ok(())
    }
}

impl RecomposeOp {
    fn apply<T: Scalar>(&self, x: &Tensor<T>) -> Tensor<T> {
        let s = x.shape();
        let mut out = x.clone();
        let lam = self.lambda;
        for (n, p) in self.plans.iter().enumerate() {
            for c in (0..s.c()).filter(|&c| p.mask[c]) {
                let base = s.index(n, c, 0, 0);
                let scale = p.target_sigma[c] / p.sigma[c];
                for v in &mut out.data_mut()[base..base + s.plane()] {
                    let f = v.as_f64();
                    let restyled = scale * (f - p.mu[c]) + p.target_mu[c];
                    *v = T::of(lam * f + (1.0 - lam) * restyled);
                }
            }
        }
        out
    }

    fn backward_sample<T: Scalar>(&self, s: Shape, n: usize, x: &Tensor<T>, g: &Tensor<T>, dx: &mut [T]) {
        let p = &self.plans[n];
        let lam = self.lambda;
        let hw = s.plane();
        let chans = s.c();
        let mut d_mu = vec![0.0; chans];
        let mut d_sigma = vec![0.0; chans];
        let mut d_kappa = vec![0.0; p.kappa.len()];
        for c in 0..chans {
            let base = s.index(n, c, 0, 0);
            let gp = &g.data()[base..base + hw];
            let xp = &x.data()[base..base + hw];
            let out = &mut dx[base..base + hw];
            if !p.mask[c] {
                out.iter_mut().zip(gp).for_each(|(o, &gv)| *o = gv);
                continue;
            }
            let direct = lam + (1.0 - lam) * p.target_sigma[c] / p.sigma[c];
            let (mut sum_g, mut sum_gx) = (0.0, 0.0);
            for (o, (&gv, &xv)) in out.iter_mut().zip(gp.iter().zip(xp)) {
                let gv = gv.as_f64();
                let xhat = (xv.as_f64() - p.mu[c]) / p.sigma[c];
                *o = T::of(direct * gv);
                sum_g += gv;
                sum_gx += gv * xhat;
            }
            let d_tmu = (1.0 - lam) * sum_g;
            let d_tsigma = (1.0 - lam) * sum_gx;
            // through x_hat = (x - mu) / sigma
            d_mu[c] -= (1.0 - lam) * p.target_sigma[c] * sum_g / p.sigma[c];
            d_sigma[c] -= (1.0 - lam) * p.target_sigma[c] * sum_gx / p.sigma[c];
            for (m, (pmu, psig)) in self.protos.iter().enumerate() {
                d_kappa[m] += d_tmu * pmu[c] + d_tsigma * psig[c];
            }
        }
        // kappa = softmax(-kl)
        let avg: f64 = p.kappa.iter().zip(&d_kappa).map(|(k, d)| k * d).sum();
        for (m, (pmu, psig)) in self.protos.iter().enumerate() {
            let d_kl = -p.kappa[m] * (d_kappa[m] - avg);
            if d_kl == 0.0 {
                continue;
            }
            for c in 0..chans {
                let ps2 = psig[c] * psig[c];
                d_mu[c] += d_kl * (p.mu[c] - pmu[c]) / ps2;
                d_sigma[c] += d_kl * (p.sigma[c] / ps2 - 1.0 / p.sigma[c]);
            }
        }
        for c in 0..chans {
            let live_sigma = if p.sigma_live[c] { d_sigma[c] } else { 0.0 };
            if d_mu[c] == 0.0 && live_sigma == 0.0 {
                continue;
            }
            let base = s.index(n, c, 0, 0);
            let xp = &x.data()[base..base + hw];
            let k_mu = d_mu[c] / hw as f64;
            let k_sigma = live_sigma / (hw as f64 * p.sigma[c]);
            for (o, &xv) in dx[base..base + hw].iter_mut().zip(xp) {
                *o = *o + T::of(k_mu + k_sigma * (xv.as_f64() - p.mu[c]));
            }
        }
    }
}

impl<T: Scalar> CustomOp<T> for RecomposeOp {
    fn name(&self) -> &'static str {
        "style_recompose"
    }

    fn inputs(&self) -> Vec<Var> {
        vec![self.input]
    }

    fn backward(&self, grad: &Tensor<T>, inputs: &[&Tensor<T>]) -> Result<Vec<Option<Tensor<T>>>> {
        let x = inputs[0];
        let s = x.shape();
        let mut dx = vec![T::zero(); s.numel()];
        for n in 0..s.n() {
            self.backward_sample(s, n, x, grad, &mut dx);
        }
        Ok(vec![Some(Tensor::from_vec(s, dx)?)])
    }
}
