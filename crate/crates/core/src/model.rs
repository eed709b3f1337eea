//! Backbone, attention module and classifier head assembled into one model.
//!
//! The backbone is a stack of `conv3x3 → relu → maxpool2` blocks; its output
//! is the feature-map stack `A`. Attention (per the ablation flags) yields
//! `D`, which is average-pooled and fed through the affine head.

use rand::Rng;

use crate::attention::{self, AttentionParams, SpatialMode};
use crate::config::{join_list, KvMap};
use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationFlags {
    pub channel_attention: bool,
    pub spatial_attention: bool,
    pub ggam: bool,
}

impl AblationFlags {
    pub const FULL: AblationFlags = AblationFlags { channel_attention: true, spatial_attention: true, ggam: true };
    pub const BASELINE: AblationFlags =
        AblationFlags { channel_attention: false, spatial_attention: false, ggam: false };

    /// The eight flag combinations, ordered as (spatial, channel, ggam) binary
    /// counting with `ggam` as the slowest-changing bit.
    pub fn grid() -> [AblationFlags; 8] {
        let mut out = [AblationFlags::BASELINE; 8];
        for (i, f) in out.iter_mut().enumerate() {
            f.spatial_attention = i & 1 != 0;
            f.channel_attention = i & 2 != 0;
            f.ggam = i & 4 != 0;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub input_rows: usize,
    pub input_cols: usize,
    pub backbone_channels: Vec<usize>,
    pub reduction: usize,
    pub classes: usize,
    /// Hidden widths of the classifier head; empty means a single affine map.
    pub head_hidden: Vec<usize>,
    pub flags: AblationFlags,
    pub spatial_mode: SpatialMode,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_channels: 3,
            input_rows: 64,
            input_cols: 64,
            backbone_channels: vec![16, 32, 64],
            reduction: 4,
            classes: 8,
            head_hidden: Vec::new(),
            flags: AblationFlags::FULL,
            spatial_mode: SpatialMode::SumNormalized,
            seed: 0,
        }
    }
}

pub const MODEL_KEYS: &[&str] = &[
    "model.input_channels",
    "model.input_rows",
    "model.input_cols",
    "model.backbone_channels",
    "model.reduction",
    "model.classes",
    "model.head_hidden",
    "model.channel_attention",
    "model.spatial_attention",
    "model.ggam",
    "model.spatial_mode",
    "model.seed",
];

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.backbone_channels.is_empty() || self.backbone_channels.contains(&0) {
            return bad(format!("invalid backbone channels {:?}", self.backbone_channels));
        }
        if self.input_channels == 0 || self.head_hidden.contains(&0) {
            return bad("zero-width layer".into());
        }
        let c = self.feature_channels();
        if self.reduction == 0 || !c.is_multiple_of(self.reduction) {
            return bad(format!("reduction ratio {} does not divide {c} feature channels", self.reduction));
        }
        let down = 1usize << self.backbone_channels.len();
        if !self.input_rows.is_multiple_of(down) || !self.input_cols.is_multiple_of(down) || self.input_rows < down || self.input_cols < down {
            return bad(format!(
                "input {}x{} not divisible by the backbone downsampling factor {down}",
                self.input_rows, self.input_cols
            ));
        }
        Ok(())
    }

    pub fn feature_channels(&self) -> usize {
        *self.backbone_channels.last().expect("validated non-empty")
    }

    /// `[C, rows, cols]` of the feature maps `A`.
    pub fn feature_shape(&self) -> [usize; 3] {
        let down = 1usize << self.backbone_channels.len();
        [self.feature_channels(), self.input_rows / down, self.input_cols / down]
    }

    /// Sum-to-one attention weights shrink the pooled features by roughly the
    /// number of positions they spread over (`rows·cols` for the spatial map,
    /// `C` for channel-only). The first head layer's init bound is scaled by
    /// that factor so initial logits have comparable size in every ablation.
    pub fn pooled_gain(&self) -> f64 {
        let [c, r, k] = self.feature_shape();
        if self.flags.spatial_attention {
            (r * k) as f64
        } else if self.flags.channel_attention {
            c as f64
        } else {
            1.0
        }
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.input_channels, self.input_rows, self.input_cols]
    }

    pub fn to_kv(&self, kv: &mut KvMap) {
        kv.set("model.input_channels", self.input_channels);
        kv.set("model.input_rows", self.input_rows);
        kv.set("model.input_cols", self.input_cols);
        kv.set("model.backbone_channels", join_list(&self.backbone_channels));
        kv.set("model.reduction", self.reduction);
        kv.set("model.classes", self.classes);
        kv.set("model.head_hidden", join_list(&self.head_hidden));
        kv.set("model.channel_attention", self.flags.channel_attention);
        kv.set("model.spatial_attention", self.flags.spatial_attention);
        kv.set("model.ggam", self.flags.ggam);
        kv.set("model.spatial_mode", self.spatial_mode.as_str());
        kv.set("model.seed", self.seed);
    }

    /// Reads `model.*` keys, falling back to `base` for absent ones.
    pub fn from_kv(kv: &KvMap, base: &ModelConfig) -> Result<Self> {
        let cfg = ModelConfig {
            input_channels: kv.get_or("model.input_channels", base.input_channels)?,
            input_rows: kv.get_or("model.input_rows", base.input_rows)?,
            input_cols: kv.get_or("model.input_cols", base.input_cols)?,
            backbone_channels: kv.get_list_or("model.backbone_channels", &base.backbone_channels)?,
            reduction: kv.get_or("model.reduction", base.reduction)?,
            classes: kv.get_or("model.classes", base.classes)?,
            head_hidden: kv.get_list_or("model.head_hidden", &base.head_hidden)?,
            flags: AblationFlags {
                channel_attention: kv.get_or("model.channel_attention", base.flags.channel_attention)?,
                spatial_attention: kv.get_or("model.spatial_attention", base.flags.spatial_attention)?,
                ggam: kv.get_or("model.ggam", base.flags.ggam)?,
            },
            spatial_mode: match kv.get("model.spatial_mode") {
                Some(s) => SpatialMode::parse(s)?,
                None => base.spatial_mode,
            },
            seed: kv.get_or("model.seed", base.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Affine layer `x·W + b` with `W: [in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Which learning rate a parameter trains with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Backbone,
    Head,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    /// Kernel banks `[Cout, Cin, 3, 3]`, one per block.
    pub backbone: Vec<Tensor>,
    pub attention: AttentionParams,
    pub head: Vec<Linear>,
}

fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect(), true).expect("sized")
}

impl Model {
    /// Fan-in scaled uniform initialization, deterministic in `config.seed`.
    /// The first head layer is widened by [`ModelConfig::pooled_gain`].
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(config.seed, "model-init");
        let mut backbone = Vec::with_capacity(config.backbone_channels.len());
        let mut cin = config.input_channels;
        for &cout in &config.backbone_channels {
            let fan_in = (cin * 9) as f64;
            backbone.push(uniform(&[cout, cin, 3, 3], (6.0 / fan_in).sqrt(), &mut rng));
            cin = cout;
        }
        let attention = AttentionParams::init(cin, config.reduction, &mut rng)?;
        let mut head = Vec::new();
        for &out in config.head_hidden.iter().chain(std::iter::once(&config.classes)) {
            let mut bound = 1.0 / (cin as f64).sqrt();
            if head.is_empty() {
                bound *= config.pooled_gain();
            }
            let weight = uniform(&[cin, out], bound, &mut rng);
            let bias = uniform(&[out], bound, &mut rng);
            head.push(Linear { weight, bias });
            cin = out;
        }
        Ok(Model { config, backbone, attention, head })
    }

    /// Parameters in their fixed serialization order: backbone kernels,
    /// attention `fc1`, `fc2`, then head weight/bias pairs.
    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.backbone.iter().collect();
        out.push(&self.attention.fc1);
        out.push(&self.attention.fc2);
        for l in &self.head {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.backbone.iter_mut().collect();
        out.push(&mut self.attention.fc1);
        out.push(&mut self.attention.fc2);
        for l in &mut self.head {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    pub fn parameter_names(&self) -> Vec<String> {
        let mut out: Vec<String> = (0..self.backbone.len()).map(|i| format!("backbone.{i}.kernel")).collect();
        out.push("attention.fc1".into());
        out.push("attention.fc2".into());
        for i in 0..self.head.len() {
            out.push(format!("head.{i}.weight"));
            out.push(format!("head.{i}.bias"));
        }
        out
    }

    pub fn parameter_groups(&self) -> Vec<ParamGroup> {
        let mut out = vec![ParamGroup::Backbone; self.backbone.len()];
        out.resize(out.len() + 2 + 2 * self.head.len(), ParamGroup::Head);
        out
    }

    /// Checks parameter shapes against the config and that all are finite.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let fresh = Model::build(self.config.clone())?;
        for ((name, p), q) in self.parameter_names().iter().zip(self.parameters()).zip(fresh.parameters()) {
            if p.shape() != q.shape() {
                return Err(Error::shape(format!("{name}: shape {:?}, expected {:?}", p.shape(), q.shape())));
            }
            if !p.is_finite() {
                return Err(Error::Numeric(format!("{name} holds non-finite values")));
            }
        }
        if self.parameters().len() != fresh.parameters().len() {
            return Err(Error::shape("parameter count does not match config"));
        }
        Ok(())
    }

    /// Records one forward pass on `graph`. With `retain_graph` every
    /// parameter is a gradient-carrying leaf; without it the trace is
    /// inference-only.
    pub fn forward<'g>(&self, graph: &'g Graph, image: &Tensor, retain_graph: bool) -> Result<ForwardTrace<'g>> {
        let params = self.leaves(graph, retain_graph);
        self.forward_with(graph, params, image, retain_graph)
    }

    /// Parameters entered on `graph` in [`Model::parameters`] order, as
    /// variables or constants.
    pub fn leaves<'g>(&self, graph: &'g Graph, variables: bool) -> Vec<Var<'g>> {
        self.parameters()
            .into_iter()
            .map(|p| if variables { graph.variable(p.clone()) } else { graph.constant(p.clone()) })
            .collect()
    }

    /// Forward pass using caller-supplied parameter handles.
    pub fn forward_with<'g>(
        &self,
        graph: &'g Graph,
        params: Vec<Var<'g>>,
        image: &Tensor,
        retained: bool,
    ) -> Result<ForwardTrace<'g>> {
        let want = self.config.image_shape();
        if image.shape() != want {
            return Err(Error::shape(format!("image shape {:?}, model expects {want:?}", image.shape())));
        }
        self.check_handles(&params)?;
        let mut x = graph.constant(image.clone());
        for &k in &params[..self.backbone.len()] {
            x = x.conv2d(k, 1, 1)?.relu().maxpool2d(2)?;
        }
        self.forward_from_features(params, x, retained)
    }

    /// Attention and head applied to feature maps `a` of shape
    /// [`ModelConfig::feature_shape`].
    pub fn forward_from_features<'g>(
        &self,
        params: Vec<Var<'g>>,
        a: Var<'g>,
        retained: bool,
    ) -> Result<ForwardTrace<'g>> {
        self.check_handles(&params)?;
        let [c, rows, cols] = self.config.feature_shape();
        if a.shape() != [c, rows, cols] {
            return Err(Error::shape(format!("features {:?}, model expects {:?}", a.shape(), [c, rows, cols])));
        }
        let graph = a.graph();
        let rest = &params[self.backbone.len()..];
        let (fc1, fc2, head) = (rest[0], rest[1], &rest[2..]);
        let flags = self.config.flags;

        let (s, b) = if flags.channel_attention {
            let s = attention::channel_weights(a, fc1, fc2)?;
            (s, attention::apply_channel(a, s)?)
        } else {
            (graph.constant(Tensor::full(&[c], 1.0 / c as f64)), a)
        };
        let (t, d) = if flags.spatial_attention {
            let t = attention::spatial_map(b, self.config.spatial_mode)?;
            (t, attention::apply_spatial(a, t)?)
        } else {
            (graph.constant(Tensor::full(&[rows, cols], 1.0)), b)
        };

        let logits = classify(d, head)?;
        let predicted = logits.with_value(Tensor::argmax);
        Ok(ForwardTrace { a, s, b, t, d, logits, predicted, params, retained })
    }

    fn check_handles(&self, params: &[Var<'_>]) -> Result<()> {
        let own = self.parameters();
        if params.len() != own.len() {
            return Err(Error::shape(format!("{} parameter handles for {} parameters", params.len(), own.len())));
        }
        if let Some(i) = params.iter().zip(&own).position(|(v, p)| v.shape() != p.shape()) {
            return Err(Error::shape(format!(
                "{}: handle shape {:?}, expected {:?}",
                self.parameter_names()[i],
                params[i].shape(),
                own[i].shape()
            )));
        }
        Ok(())
    }

    pub fn predict(&self, image: &Tensor) -> Result<usize> {
        let graph = Graph::new();
        Ok(self.forward(&graph, image, false)?.predicted)
    }
}

/// `gap(D)` followed by the head layers (relu between them), `[K]` logits.
fn classify<'g>(d: Var<'g>, head: &[Var<'g>]) -> Result<Var<'g>> {
    let c = d.shape()[0];
    let mut h = attention::global_avg_pool(d)?.reshape(&[1, c])?;
    let layers = head.len() / 2;
    for (i, wb) in head.chunks(2).enumerate() {
        h = h.matmul(wb[0])?.add(wb[1])?;
        if i + 1 < layers {
            h = h.relu();
        }
    }
    let k = h.numel();
    h.reshape(&[k])
}

/// One sample's forward record; every field is attached to the graph it was
/// recorded on.
#[derive(Debug, Clone)]
pub struct ForwardTrace<'g> {
    pub a: Var<'g>,
    pub s: Var<'g>,
    pub b: Var<'g>,
    pub t: Var<'g>,
    pub d: Var<'g>,
    pub logits: Var<'g>,
    /// `argmax(logits)`, lowest index on ties.
    pub predicted: usize,
    /// Parameter leaves, in [`Model::parameters`] order.
    pub params: Vec<Var<'g>>,
    retained: bool,
}

impl ForwardTrace<'_> {
    pub fn graph_retained(&self) -> bool {
        self.retained
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ModelConfig {
        ModelConfig {
            input_rows: 16,
            input_cols: 16,
            backbone_channels: vec![4, 8],
            reduction: 2,
            classes: 3,
            ..ModelConfig::default()
        }
    }

    fn image(cfg: &ModelConfig, seed: u64) -> Tensor {
        let mut rng = rng_for(seed, "img");
        let [c, r, k] = cfg.image_shape();
        Tensor::from_vec(&[c, r, k], (0..c * r * k).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn build_is_deterministic() {
        let a = Model::build(ModelConfig::default()).unwrap();
        let b = Model::build(ModelConfig::default()).unwrap();
        assert_eq!(a, b);
        let c = Model::build(ModelConfig { seed: 1, ..ModelConfig::default() }).unwrap();
        assert_ne!(a.backbone[0], c.backbone[0]);
    }

    #[test]
    fn default_feature_shape() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.feature_shape(), [64, 8, 8]);
        let m = Model::build(cfg.clone()).unwrap();
        let g = Graph::new();
        let trace = m.forward(&g, &image(&cfg, 0), false).unwrap();
        assert_eq!(trace.a.shape(), vec![64, 8, 8]);
        assert_eq!(trace.d.shape(), trace.a.shape());
        assert_eq!(trace.logits.shape(), vec![8]);
    }

    #[test]
    fn reduction_must_divide_channels() {
        let cfg = ModelConfig { reduction: 5, ..ModelConfig::default() };
        assert!(matches!(Model::build(cfg), Err(Error::Config(_))));
        let cfg = ModelConfig { classes: 1, ..ModelConfig::default() };
        assert!(Model::build(cfg).is_err());
    }

    #[test]
    fn bypass_matches_plain_cnn() {
        let cfg = ModelConfig { flags: AblationFlags::BASELINE, ..small_config() };
        let m = Model::build(cfg.clone()).unwrap();
        let img = image(&cfg, 3);
        let g = Graph::new();
        let trace = m.forward(&g, &img, true).unwrap();

        let g2 = Graph::new();
        let mut x = g2.constant(img);
        for k in &m.backbone {
            x = x.conv2d(g2.leaf(k), 1, 1).unwrap().relu().maxpool2d(2).unwrap();
        }
        let pooled = x.mean_over_space();
        let logits = pooled.matmul(g2.leaf(&m.head[0].weight)).unwrap().add(g2.leaf(&m.head[0].bias)).unwrap();
        let want = logits.data();
        let got = trace.logits.data();
        assert_eq!(want.len(), got.len());
        for (w, g) in want.iter().zip(&got) {
            assert_eq!(w.to_bits(), g.to_bits());
        }
    }

    trait MeanOverSpace<'g> {
        fn mean_over_space(&self) -> Var<'g>;
    }

    impl<'g> MeanOverSpace<'g> for Var<'g> {
        fn mean_over_space(&self) -> Var<'g> {
            let c = self.shape()[0];
            self.reduce(crate::tensor::ReduceKind::Mean, &[1, 2]).unwrap().reshape(&[1, c]).unwrap()
        }
    }

    #[test]
    fn forward_rejects_wrong_image_shape() {
        let m = Model::build(small_config()).unwrap();
        let g = Graph::new();
        let bad = Tensor::zeros(&[3, 8, 8]);
        assert!(matches!(m.forward(&g, &bad, false), Err(Error::Shape(_))));
    }

    #[test]
    fn predict_agrees_with_forward_and_is_deterministic() {
        let cfg = small_config();
        let m = Model::build(cfg.clone()).unwrap();
        for seed in 0..5 {
            let img = image(&cfg, seed);
            let g = Graph::new();
            let tr = m.forward(&g, &img, false).unwrap();
            assert_eq!(m.predict(&img).unwrap(), tr.predicted);
            let g2 = Graph::new();
            assert_eq!(m.forward(&g2, &img, false).unwrap().logits.data(), tr.logits.data());
        }
    }

    #[test]
    fn deeper_head_and_groups() {
        let cfg = ModelConfig { head_hidden: vec![5], ..small_config() };
        let m = Model::build(cfg.clone()).unwrap();
        assert_eq!(m.parameters().len(), 2 + 2 + 4);
        assert_eq!(m.parameter_names().len(), m.parameters().len());
        assert_eq!(m.parameter_groups().iter().filter(|g| **g == ParamGroup::Backbone).count(), 2);
        let g = Graph::new();
        assert_eq!(m.forward(&g, &image(&cfg, 1), false).unwrap().logits.shape(), vec![3]);
        m.validate().unwrap();
    }

    #[test]
    fn config_kv_round_trip() {
        let cfg = ModelConfig { head_hidden: vec![7], spatial_mode: SpatialMode::ExpNormalized, ..small_config() };
        let mut kv = KvMap::new();
        cfg.to_kv(&mut kv);
        assert_eq!(ModelConfig::from_kv(&kv, &ModelConfig::default()).unwrap(), cfg);
    }

    #[test]
    fn grid_covers_all_combinations() {
        let grid = AblationFlags::grid();
        assert_eq!(grid[0], AblationFlags::BASELINE);
        assert_eq!(grid[7], AblationFlags::FULL);
        for i in 0..8 {
            for j in 0..i {
                assert_ne!(grid[i], grid[j]);
            }
        }
    }
}
