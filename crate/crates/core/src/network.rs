//! The U-shaped detector: convolutional encoder stages with phase
//! rectification and style recomposition, decoder stages whose skip
//! connections are gated by orthogonal attention, and a sigmoid head.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::spectral::{Prm, PrmInit};
use crate::style::{SsrConfig, SsrSite};
use crate::tensor::{Axis, BatchNorm, Checkpoint, Conv2d, Graph, Init, ParamStore, Record, Tensor, Upsample, Var};

/// Train mode uses batch statistics and updates running state; eval mode is read-only.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn is_train(self) -> bool {
        self == Mode::Train
    }
}

/// Squeeze used to build the skip-connection attention mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Attention {
    /// Separate height and width descriptors; keeps positional structure.
    #[default]
    Orthogonal,
    /// A single 2-D global average per channel (ablation reference).
    GlobalPool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub stages: usize,
    /// Width of stage 1; stage `l` has `base_channels * 2^(l-1)` channels.
    pub base_channels: usize,
    pub in_channels: usize,
    pub input_size: (usize, usize),
    /// Phase rectification per encoder stage.
    pub prm: Vec<bool>,
    pub prm_init: PrmInit,
    pub oam: bool,
    pub attention: Attention,
    /// Initialization of the second conv of each attention branch.
    pub oam_init: Init,
    pub ssr: bool,
    /// 1-based encoder stages carrying style recomposition.
    pub ssr_stages: Vec<usize>,
    /// Number of source domains (one prototype each per site).
    pub ssr_domains: usize,
    pub ssr_config: SsrConfig,
    pub upsample: Upsample,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            stages: 4,
            base_channels: 16,
            in_channels: 1,
            input_size: (64, 64),
            prm: vec![true; 4],
            prm_init: PrmInit::Kaiming,
            oam: true,
            attention: Attention::Orthogonal,
            oam_init: Init::Kaiming,
            ssr: true,
            ssr_stages: vec![1, 2],
            ssr_domains: 2,
            ssr_config: SsrConfig::default(),
            upsample: Upsample::Bilinear,
        }
    }
}

impl ModelConfig {
    /// Same geometry with every component switched off: a plain U-Net.
    pub fn baseline(mut self) -> Self {
        self.prm = vec![false; self.stages];
        self.oam = false;
        self.ssr = false;
        self
    }

    pub fn set_prm(&mut self, on: bool) {
        self.prm = vec![on; self.stages];
    }

    /// Channels of 1-based stage `l`.
    pub fn channels(&self, l: usize) -> usize {
        self.base_channels << (l - 1)
    }

    pub fn ssr_at(&self, l: usize) -> bool {
        self.ssr && self.ssr_stages.contains(&l)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.stages < 2 {
            return bad(format!("stages must be at least 2, got {}", self.stages));
        }
        if self.base_channels == 0 || self.in_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        let (h, w) = self.input_size;
        if !h.is_power_of_two() || !w.is_power_of_two() {
            return bad(format!("input size {h}x{w} must be powers of two"));
        }
        let div = 1 << (self.stages - 1);
        if h < 2 * div || w < 2 * div {
            return bad(format!("input {h}x{w} too small for {} stages", self.stages));
        }
        if self.prm.len() != self.stages {
            return bad(format!("{} prm flags for {} stages", self.prm.len(), self.stages));
        }
        if let Some(l) = self.ssr_stages.iter().find(|&&l| l == 0 || l > self.stages) {
            return bad(format!("ssr stage {l} outside 1..={}", self.stages));
        }
        if self.ssr && self.ssr_domains == 0 {
            return bad("style recomposition needs at least one source domain".into());
        }
        self.ssr_config.validate()
    }
}

/// Conv, batch norm, leaky ReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock<T: Scalar> {
    pub conv: Conv2d,
    pub bn: BatchNorm<T>,
}

impl<T: Scalar> ConvBlock<T> {
    fn new(store: &mut ParamStore<T>, prefix: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        ConvBlock {
            conv: Conv2d::new(store, &format!("{prefix}.conv"), cin, cout, 3, Init::Kaiming, rng),
            bn: BatchNorm::new(store, &format!("{prefix}.bn"), cout),
        }
    }

    pub fn forward(&mut self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let y = self.conv.forward(g, store, x)?;
        let y = self.bn.forward(g, store, y, mode.is_train())?;
        g.leaky_relu(y)
    }
}

/// Two 1x1 branches turning directional descriptors into an attention mask.
#[derive(Clone, Debug)]
pub struct Oam {
    pub h1: Conv2d,
    pub h2: Conv2d,
    pub w1: Conv2d,
    pub w2: Conv2d,
}

impl Oam {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, channels: usize, last: Init, rng: &mut impl Rng) -> Self {
        let hidden = (channels / 2).max(1);
        let mut conv = |name: &str, cin, cout, init| Conv2d::new(store, &format!("{prefix}.{name}"), cin, cout, 1, init, rng);
        Oam {
            h1: conv("h1", 2 * channels, hidden, Init::Kaiming),
            h2: conv("h2", hidden, channels, last),
            w1: conv("w1", 2 * channels, hidden, Init::Kaiming),
            w2: conv("w2", hidden, channels, last),
        }
    }

    fn branch<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, c1: &Conv2d, c2: &Conv2d, x: Var) -> Result<Var> {
        let y = c1.forward(g, store, x)?;
        let y = g.leaky_relu(y)?;
        c2.forward(g, store, y)
    }

    /// Returns `(sigmoid(G) * e, sigmoid(G))` where `G` sums the two
    /// directional branches (broadcast to `N x C x H x W`).
    pub fn refine<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        e: Var,
        d: Var,
        kind: Attention,
    ) -> Result<(Var, Var)> {
        if g.shape(e) != g.shape(d) {
            return Err(Error::shape(
                "oam",
                format!("skip {:?} vs decoder {:?}", g.shape(e), g.shape(d)),
            ));
        }
        let logits = match kind {
            Attention::Orthogonal => {
                let eh = g.axis_mean(e, Axis::Width)?;
                let dh = g.axis_mean(d, Axis::Width)?;
                let ew = g.axis_mean(e, Axis::Height)?;
                let dw = g.axis_mean(d, Axis::Height)?;
                let gh = g.concat_channels(eh, dh)?;
                let gw = g.concat_channels(ew, dw)?;
                let bh = Self::branch(g, store, &self.h1, &self.h2, gh)?;
                let bw = Self::branch(g, store, &self.w1, &self.w2, gw)?;
                g.add(bh, bw)?
            }
            Attention::GlobalPool => {
                let es = g.axis_mean(e, Axis::Spatial)?;
                let ds = g.axis_mean(d, Axis::Spatial)?;
                let gs = g.concat_channels(es, ds)?;
                let bh = Self::branch(g, store, &self.h1, &self.h2, gs)?;
                let bw = Self::branch(g, store, &self.w1, &self.w2, gs)?;
                let sum = g.add(bh, bw)?;
                // spread the per-channel value over the map
                let zeros = g.constant(Tensor::zeros(g.shape(e)))?;
                g.add(sum, zeros)?
            }
        };
        let mask = g.sigmoid(logits)?;
        let refined = g.mul(mask, e)?;
        Ok((refined, mask))
    }
}

#[derive(Clone, Debug)]
pub struct EncoderStage<T: Scalar> {
    pub block1: ConvBlock<T>,
    pub block2: ConvBlock<T>,
    pub prm: Option<Prm<T>>,
    pub ssr: Option<SsrSite>,
}

#[derive(Clone, Debug)]
pub struct DecoderStage<T: Scalar> {
    /// 1x1 conv bringing the deeper decoder output to this stage's width.
    pub project: Conv2d,
    pub oam: Option<Oam>,
    pub block: ConvBlock<T>,
}

/// Intermediate nodes of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub prob: Var,
    /// Encoder outputs (skip features), stage 1 first.
    pub skips: Vec<Var>,
    /// Decoder outputs `D_l` for `l = 1..L-1`, stage 1 first.
    pub decoded: Vec<Var>,
    /// Attention masks per decoder stage, when enabled.
    pub masks: Vec<Option<Var>>,
}

#[derive(Clone, Debug)]
pub struct S2cpModel<T: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub encoder: Vec<EncoderStage<T>>,
    /// `decoder[l - 1]` produces `D_l`, for `l = 1..L-1`.
    pub decoder: Vec<DecoderStage<T>>,
    pub head: Conv2d,
}

impl<T: Scalar> S2cpModel<T> {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut encoder = Vec::with_capacity(config.stages);
        for l in 1..=config.stages {
            let cin = if l == 1 { config.in_channels } else { config.channels(l - 1) };
            let c = config.channels(l);
            let p = format!("enc{l}");
            encoder.push(EncoderStage {
                block1: ConvBlock::new(&mut store, &format!("{p}.block1"), cin, c, rng),
                block2: ConvBlock::new(&mut store, &format!("{p}.block2"), c, c, rng),
                prm: config.prm[l - 1].then(|| Prm::new(&mut store, &format!("{p}.prm"), c, config.prm_init, rng)),
                ssr: config
                    .ssr_at(l)
                    .then(|| SsrSite::new(l, config.ssr_domains, c, config.ssr_config)),
            });
        }
        let mut decoder = Vec::with_capacity(config.stages - 1);
        for l in 1..config.stages {
            let c = config.channels(l);
            let p = format!("dec{l}");
            decoder.push(DecoderStage {
                project: Conv2d::new(&mut store, &format!("{p}.project"), config.channels(l + 1), c, 1, Init::Kaiming, rng),
                oam: config
                    .oam
                    .then(|| Oam::new(&mut store, &format!("{p}.oam"), c, config.oam_init, rng)),
                block: ConvBlock::new(&mut store, &format!("{p}.block"), 2 * c, c, rng),
            });
        }
        let head = Conv2d::new(&mut store, "head", config.channels(1), 1, 1, Init::Kaiming, rng);
        Ok(S2cpModel {
            config,
            store,
            encoder,
            decoder,
            head,
        })
    }

    fn check_input(&self, g: &Graph<T>, x: Var) -> Result<()> {
        let s = g.shape(x);
        let (h, w) = self.config.input_size;
        if s.c() != self.config.in_channels || s.h() != h || s.w() != w {
            return Err(Error::shape(
                "model_input",
                format!(
                    "expected (N, {}, {h}, {w}), got {:?}",
                    self.config.in_channels,
                    s.0
                ),
            ));
        }
        Ok(())
    }

    /// Encoder outputs of every stage; the next stage reads the 2x2 max-pool
    /// of the previous output.
    pub fn encode(&mut self, g: &mut Graph<T>, x: Var, mode: Mode, domains: Option<&[usize]>) -> Result<Vec<Var>> {
        self.check_input(g, x)?;
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut cur = x;
        for (i, stage) in self.encoder.iter_mut().enumerate() {
            if i > 0 {
                cur = g.maxpool2(cur)?;
            }
            let y = stage.block1.forward(g, &self.store, cur, mode)?;
            let mut y = stage.block2.forward(g, &self.store, y, mode)?;
            if let Some(prm) = &mut stage.prm {
                y = prm.forward(g, &self.store, y, mode.is_train())?;
            }
            if let Some(site) = &mut stage.ssr {
                y = site.forward(g, y, mode.is_train(), domains)?;
            }
            skips.push(y);
            cur = y;
        }
        Ok(skips)
    }

    /// `D_l` from the deeper decoder output and the stage-`l` skip.
    pub fn decode_stage(
        &mut self,
        g: &mut Graph<T>,
        deeper: Var,
        skip: Var,
        l: usize,
        mode: Mode,
    ) -> Result<(Var, Option<Var>)> {
        let stage = &mut self.decoder[l - 1];
        let d = stage.project.forward(g, &self.store, deeper)?;
        let d = g.upsample2(d, self.config.upsample)?;
        let (gated, mask) = match &stage.oam {
            Some(oam) => {
                let (r, m) = oam.refine(g, &self.store, skip, d, self.config.attention)?;
                (r, Some(m))
            }
            None => (skip, None),
        };
        let cat = g.concat_channels(gated, d)?;
        let out = stage.block.forward(g, &self.store, cat, mode)?;
        Ok((out, mask))
    }

    pub fn forward(&mut self, g: &mut Graph<T>, x: Var, mode: Mode, domains: Option<&[usize]>) -> Result<ForwardPass> {
        let skips = self.encode(g, x, mode, domains)?;
        let levels = self.config.stages;
        let mut d = skips[levels - 1];
        let mut decoded = vec![d; levels - 1];
        let mut masks = vec![None; levels - 1];
        for l in (1..levels).rev() {
            let (out, mask) = self.decode_stage(g, d, skips[l - 1], l, mode)?;
            decoded[l - 1] = out;
            masks[l - 1] = mask;
            d = out;
        }
        let logits = self.head.forward(g, &self.store, d)?;
        let prob = g.sigmoid(logits)?;
        Ok(ForwardPass {
            prob,
            skips,
            decoded,
            masks,
        })
    }

    /// Eval-mode probabilities for a batch `(N, C_in, H, W)`.
    pub fn predict(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let v = g.constant(x.clone())?;
        let pass = self.forward(&mut g, v, Mode::Eval, None)?;
        Ok(g.value(pass.prob).clone())
    }

    fn batch_norms(&self) -> Vec<&BatchNorm<T>> {
        let mut out = Vec::new();
        for s in &self.encoder {
            out.push(&s.block1.bn);
            out.push(&s.block2.bn);
            if let Some(p) = &s.prm {
                out.push(&p.bn);
            }
        }
        out.extend(self.decoder.iter().map(|d| &d.block.bn));
        out
    }

    fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        let mut out = Vec::new();
        for s in &mut self.encoder {
            out.push(&mut s.block1.bn);
            out.push(&mut s.block2.bn);
            if let Some(p) = &mut s.prm {
                out.push(&mut p.bn);
            }
        }
        out.extend(self.decoder.iter_mut().map(|d| &mut d.block.bn));
        out
    }

    fn bn_prefix(&self, bn: &BatchNorm<T>) -> String {
        let name = self.store.name(bn.gamma);
        name.strip_suffix(".gamma").unwrap_or(name).to_string()
    }

    /// Parameters, batch-norm running statistics and style prototypes.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        for (_, name, value) in self.store.iter() {
            ck.push(Record::from_tensor(name, value));
        }
        for bn in self.batch_norms() {
            if bn.state.initialized {
                let p = self.bn_prefix(bn);
                ck.push(Record::from_slice(format!("{p}.running_mean"), &bn.state.running_mean));
                ck.push(Record::from_slice(format!("{p}.running_var"), &bn.state.running_var));
            }
        }
        for site in self.encoder.iter().filter_map(|s| s.ssr.as_ref()) {
            site.save(&mut ck);
        }
        ck
    }

    /// Loads everything [`Self::to_checkpoint`] writes. Every parameter must
    /// be present with matching dims; extra records are ignored.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        let ids: Vec<_> = self.store.ids().collect();
        for id in ids {
            let name = self.store.name(id).to_string();
            let t: Tensor<T> = ck.require(&name)?.to_tensor()?;
            if t.shape() != self.store.value(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: stored {:?}, model expects {:?}",
                    t.dims(),
                    self.store.value(id).dims()
                )));
            }
            *self.store.value_mut(id) = t;
        }
        let prefixes: Vec<String> = self.batch_norms().into_iter().map(|b| self.bn_prefix(b)).collect();
        for (bn, p) in self.batch_norms_mut().into_iter().zip(prefixes) {
            match (ck.get(&format!("{p}.running_mean")), ck.get(&format!("{p}.running_var"))) {
                (Some(m), Some(v)) => {
                    let (m, v): (Vec<T>, Vec<T>) = (m.to_vec(), v.to_vec());
                    if m.len() != bn.channels() || v.len() != bn.channels() {
                        return Err(Error::Checkpoint(format!("{p}: running stats of wrong length")));
                    }
                    bn.state.running_mean = m;
                    bn.state.running_var = v;
                    bn.state.initialized = true;
                }
                _ => bn.state.initialized = false,
            }
        }
        for site in self.encoder.iter_mut().filter_map(|s| s.ssr.as_mut()) {
            site.load(ck)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            stages: 3,
            base_channels: 4,
            input_size: (16, 16),
            prm: vec![true; 3],
            ..ModelConfig::default()
        }
    }

    #[test]
    fn skip_pyramid_and_output_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = S2cpModel::<f32>::new(tiny(), &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::uniform([2, 1, 16, 16], 0.0, 1.0, &mut rng)).unwrap();
        let pass = model.forward(&mut g, x, Mode::Train, Some(&[0, 1])).unwrap();
        let dims: Vec<_> = pass.skips.iter().map(|&s| g.shape(s).0).collect();
        assert_eq!(dims, vec![[2, 4, 16, 16], [2, 8, 8, 8], [2, 16, 4, 4]]);
        for (l, &d) in pass.decoded.iter().enumerate() {
            assert_eq!(g.shape(d).0, [2, 4 << l, 16 >> l, 16 >> l]);
        }
        let p = g.value(pass.prob);
        assert_eq!(p.dims(), [2, 1, 16, 16]);
        assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn train_needs_domains_when_ssr_on() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = S2cpModel::<f64>::new(tiny(), &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([1, 1, 16, 16])).unwrap();
        assert!(model.forward(&mut g, x, Mode::Train, None).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.ssr_stages = vec![4];
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.input_size = (12, 16);
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.stages = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn checkpoint_round_trip_reproduces_eval_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut model = S2cpModel::<f32>::new(tiny(), &mut rng).unwrap();
        let x = Tensor::uniform([2, 1, 16, 16], 0.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x.clone()).unwrap();
        model.forward(&mut g, xv, Mode::Train, Some(&[0, 1])).unwrap();
        let want = model.predict(&x).unwrap();
        let bytes = model.to_checkpoint().to_bytes();
        let mut other = S2cpModel::<f32>::new(tiny(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        other.load_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(other.predict(&x).unwrap(), want);
    }

    #[test]
    fn zero_init_attention_halves_the_skip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let oam = Oam::new(&mut store, "oam", 4, Init::Zero, &mut rng);
        let mut g = Graph::new();
        let e = g.constant(Tensor::uniform([1, 4, 8, 8], -1.0, 1.0, &mut rng)).unwrap();
        let d = g.constant(Tensor::uniform([1, 4, 8, 8], -1.0, 1.0, &mut rng)).unwrap();
        let (r, m) = oam.refine(&mut g, &store, e, d, Attention::Orthogonal).unwrap();
        assert!(g.value(m).data().iter().all(|&v| v == 0.5));
        assert_eq!(g.value(r), &g.value(e).map(|v| 0.5 * v));
    }
}
