//! The classification network and its three stage wirings.
//!
//! ```text
//! Baseline : backbone -> conv_e -> relu -> conv_s -> relu -> head(1x1) -> GAP
//! Expansion: backbone -> ES     -> relu -> clip   -> conv_s -> relu -> head -> GAP
//! Shrinkage: backbone -> ES     -> relu -> clip   -> SS     -> relu -> head -> GAP
//! ```
//!
//! `ES` and `SS` are deformable layers whose regular weights are the trained
//! baseline `conv_e` / `conv_s` weights. The head is applied as a 1x1
//! convolution before pooling, so the per-pixel class evidence used for CAMs
//! and soft maps falls out of the same forward pass.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Var};
use crate::cam::clip_features_graph;
use crate::deform::{DeformLayer, DeformVars};
use crate::error::{Error, Result};
use crate::io::{read_tensor, write_tensor};
use crate::kernels::conv_out_size;
use crate::tensor::Tensor;

/// Pixels are mapped to `(x - INPUT_MEAN) / INPUT_STD` before the first
/// convolution.
pub const INPUT_MEAN: f32 = 0.25;
pub const INPUT_STD: f32 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Baseline,
    Expansion,
    Shrinkage,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Baseline => "baseline",
            Stage::Expansion => "expansion",
            Stage::Shrinkage => "shrinkage",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Stage::Baseline),
            "expansion" => Ok(Stage::Expansion),
            "shrinkage" => Ok(Stage::Shrinkage),
            other => Err(Error::Config(format!("unknown stage `{other}`"))),
        }
    }

    /// Stage whose checkpoint initializes this one.
    pub fn predecessor(self) -> Option<Stage> {
        match self {
            Stage::Baseline => None,
            Stage::Expansion => Some(Stage::Baseline),
            Stage::Shrinkage => Some(Stage::Expansion),
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub classes: usize,
    pub in_channels: usize,
    /// Widths of the stride-2 backbone blocks.
    pub widths: Vec<usize>,
    /// Channels of every map after the backbone (`D`).
    pub feature_dim: usize,
    /// Kernel of the two extra layers that later become ES / SS.
    pub extra_kernel: usize,
    /// Kernel of the offset branches.
    pub offset_kernel: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            classes: 3,
            in_channels: 3,
            widths: vec![32, 64, 128],
            feature_dim: 128,
            extra_kernel: 3,
            offset_kernel: 3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(Error::Config("classes must be >= 1".into()));
        }
        if self.in_channels == 0 || self.feature_dim == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config("backbone widths must be a non-empty list of positive values".into()));
        }
        for (what, k) in [("extra_kernel", self.extra_kernel), ("offset_kernel", self.offset_kernel)] {
            if k % 2 == 0 {
                return Err(Error::Config(format!("{what} must be odd, got {k}")));
            }
        }
        Ok(())
    }

    pub fn output_stride(&self) -> usize {
        1 << self.widths.len()
    }

    /// Spatial size of the final feature map for an `h x w` input.
    pub fn feature_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (mut h, mut w) = (h, w);
        for _ in &self.widths {
            h = conv_out_size(h, 3, 2, 1)?;
            w = conv_out_size(w, 3, 2, 1)?;
        }
        (h >= 1 && w >= 1).then_some((h, w))
    }
}

/// Ablation switches that change the network wiring.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablation {
    /// Expansion without the deformable layer: the inverse loss updates
    /// the backbone and the first extra convolution instead of offsets.
    pub no_es: bool,
    /// No feature clipping after the expansion sampler.
    pub no_clip: bool,
    /// Shrinkage without the deformable layer: the second extra convolution
    /// is trained as a plain convolution.
    pub no_ss: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayer {
    fn he(cin: usize, cout: usize, k: usize, stride: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: he_normal(&[cout, cin, k, k], rng),
            bias: Tensor::zeros(&[cout]),
            stride,
            padding: k / 2,
        }
    }
}

fn he_normal(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let normal = Normal::new(0.0f64, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    Tensor::from_fn(shape, |_| normal.sample(rng) as f32)
}

/// Final classification layer `w: [C, D]`, `b: [C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ClassifierHead {
    pub fn classes(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Weight viewed as a `[C, D, 1, 1]` convolution kernel.
    pub fn as_kernel(&self) -> Tensor {
        let (c, d) = (self.classes(), self.dim());
        self.weight.clone().reshape(&[c, d, 1, 1]).expect("same numel")
    }
}

/// Where a forward pass starts. Later entries skip frozen prefixes whose
/// output was cached.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Entry {
    /// Raw `[N,3,H,W]` images.
    Image,
    /// Backbone output.
    Backbone,
    /// Output of the expansion sampler after ReLU and clipping.
    Clipped,
}

/// Graph handles of every parameter, in [`Model::param_names`] order.
pub struct Bindings {
    vars: Vec<Var>,
}

impl Bindings {
    pub fn get(&self, index: usize) -> Var {
        self.vars[index]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Nodes produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub backbone: Option<Var>,
    pub clipped: Option<Var>,
    /// Last feature map before pooling, `[N,D,h,w]`.
    pub features: Var,
    /// Per-pixel class evidence including the head bias, `[N,C,h,w]`.
    pub evidence: Var,
    /// Pooled evidence, `[N,C]`.
    pub logits: Var,
    pub es_offsets: Option<Var>,
    pub ss_offsets: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub stage: Stage,
    pub ablation: Ablation,
    /// Clipping ratio applied after the expansion sampler.
    pub clip_beta: f64,
    pub backbone: Vec<ConvLayer>,
    pub es: DeformLayer,
    pub ss: DeformLayer,
    pub head: ClassifierHead,
}

impl Model {
    /// Baseline network with He-initialized convolutions, a zero head and
    /// zero offset branches.
    pub fn build(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut backbone = Vec::new();
        let mut cin = config.in_channels;
        for &w in &config.widths {
            backbone.push(ConvLayer::he(cin, w, 3, 2, rng));
            cin = w;
        }
        let d = config.feature_dim;
        backbone.push(ConvLayer::he(cin, d, 3, 1, rng));
        let extra = |rng: &mut _| -> Result<DeformLayer> {
            let conv = ConvLayer::he(d, d, config.extra_kernel, 1, rng);
            DeformLayer::from_conv(conv.weight, conv.bias, config.offset_kernel, false)
        };
        let es = extra(rng)?;
        let ss = extra(rng)?;
        Ok(Self {
            config: config.clone(),
            stage: Stage::Baseline,
            ablation: Ablation::default(),
            clip_beta: 1.0,
            backbone,
            es,
            ss,
            head: ClassifierHead {
                weight: Tensor::zeros(&[config.classes, d]),
                bias: Tensor::zeros(&[config.classes]),
            },
        })
    }

    /// Initialize `stage` from a checkpoint of its predecessor stage.
    ///
    /// Parameters are copied; the regular weights of the deformable layers
    /// are marked frozen. Expansion-time wiring (clipping ratio, `no_es`,
    /// `no_clip`) is taken from `ablation`/`beta` when entering Expansion
    /// and inherited from the checkpoint when entering Shrinkage.
    pub fn rewire(
        config: &ModelConfig,
        stage: Stage,
        checkpoint: &Model,
        ablation: Ablation,
        beta: f64,
    ) -> Result<Self> {
        if checkpoint.config.classes != config.classes {
            return Err(Error::Load(format!(
                "checkpoint has {} classes, config expects {}",
                checkpoint.config.classes, config.classes
            )));
        }
        if &checkpoint.config != config {
            return Err(Error::Load("checkpoint architecture differs from config".into()));
        }
        match stage.predecessor() {
            Some(prev) if prev == checkpoint.stage => {}
            _ => {
                return Err(Error::Load(format!(
                    "cannot initialize the {stage} stage from a {} checkpoint",
                    checkpoint.stage
                )))
            }
        }
        if !(beta > 0.0 && beta <= 1.0) {
            return Err(Error::Config(format!("beta must lie in (0, 1], got {beta}")));
        }
        let mut m = checkpoint.clone();
        m.stage = stage;
        match stage {
            Stage::Expansion => {
                m.ablation = Ablation {
                    no_es: ablation.no_es,
                    no_clip: ablation.no_clip,
                    no_ss: false,
                };
                m.clip_beta = beta;
                m.es.freeze_regular = !ablation.no_es;
            }
            Stage::Shrinkage => {
                m.ablation.no_ss = ablation.no_ss;
                m.ss.freeze_regular = !ablation.no_ss;
            }
            Stage::Baseline => unreachable!("baseline has no predecessor"),
        }
        Ok(m)
    }

    pub fn es_deformable(&self) -> bool {
        self.stage >= Stage::Expansion && !self.ablation.no_es
    }

    pub fn ss_deformable(&self) -> bool {
        self.stage == Stage::Shrinkage && !self.ablation.no_ss
    }

    pub fn clip_active(&self) -> bool {
        self.stage >= Stage::Expansion && !self.ablation.no_clip
    }

    /// Parameter names in serialization order.
    pub fn param_names(&self) -> Vec<String> {
        self.params().into_iter().map(|(n, _)| n).collect()
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.backbone.iter().enumerate() {
            out.push((format!("backbone.{i}.weight"), &l.weight));
            out.push((format!("backbone.{i}.bias"), &l.bias));
        }
        for (tag, l) in [("es", &self.es), ("ss", &self.ss)] {
            out.push((format!("{tag}.weight"), &l.weight));
            out.push((format!("{tag}.bias"), &l.bias));
            out.push((format!("{tag}.offset.weight"), &l.offset_weight));
            out.push((format!("{tag}.offset.bias"), &l.offset_bias));
        }
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in self.backbone.iter_mut() {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        for l in [&mut self.es, &mut self.ss] {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
            out.push(&mut l.offset_weight);
            out.push(&mut l.offset_bias);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Whether the current stage wiring updates parameter `name`.
    pub fn trainable(&self, name: &str) -> bool {
        let offset = |tag: &str| name.starts_with(&format!("{tag}.offset."));
        let regular = |tag: &str| name == format!("{tag}.weight") || name == format!("{tag}.bias");
        match self.stage {
            Stage::Baseline => !offset("es") && !offset("ss"),
            Stage::Expansion if self.ablation.no_es => name.starts_with("backbone.") || regular("es"),
            Stage::Expansion => offset("es"),
            Stage::Shrinkage if self.ablation.no_ss => regular("ss"),
            Stage::Shrinkage => offset("ss"),
        }
    }

    /// Earliest entry point whose prefix is entirely frozen.
    pub fn frozen_entry(&self) -> Entry {
        let names = self.param_names();
        let any = |prefixes: &[&str]| {
            names
                .iter()
                .any(|n| prefixes.iter().any(|p| n.starts_with(p)) && self.trainable(n))
        };
        if any(&["backbone."]) {
            Entry::Image
        } else if any(&["es."]) {
            Entry::Backbone
        } else {
            Entry::Clipped
        }
    }

    /// Register every parameter as a leaf, trainable per the stage mask.
    pub fn bind(&self, g: &mut Graph) -> Result<Bindings> {
        let mut vars = Vec::new();
        for (name, t) in self.params() {
            let t = if name == "head.weight" { self.head.as_kernel() } else { t.clone() };
            vars.push(g.leaf(t, self.trainable(&name))?);
        }
        Ok(Bindings { vars })
    }

    fn idx(&self, name: &str) -> usize {
        self.param_names()
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    fn deform_vars(&self, b: &Bindings, tag: &str) -> DeformVars {
        DeformVars {
            weight: b.get(self.idx(&format!("{tag}.weight"))),
            bias: b.get(self.idx(&format!("{tag}.bias"))),
            offset_weight: b.get(self.idx(&format!("{tag}.offset.weight"))),
            offset_bias: b.get(self.idx(&format!("{tag}.offset.bias"))),
        }
    }

    /// Run the stage wiring from `entry` on input `x`.
    pub fn forward(&self, g: &mut Graph, b: &Bindings, entry: Entry, x: Var) -> Result<Forward> {
        let mut h = x;
        let mut backbone = None;
        let mut clipped = None;
        let (mut es_offsets, mut ss_offsets) = (None, None);

        if entry == Entry::Image {
            let (_, c, _, _) = g.value(x).dims4()?;
            if c != self.config.in_channels {
                return Err(Error::Dimension(format!(
                    "image has {c} channels, model expects {}",
                    self.config.in_channels
                )));
            }
            let shift = g.constant(Tensor::full(g.value(x).shape(), -INPUT_MEAN))?;
            h = g.add(h, shift)?;
            h = g.mul_scalar(h, 1.0 / INPUT_STD)?;
            for (i, l) in self.backbone.iter().enumerate() {
                let w = b.get(2 * i);
                let bias = b.get(2 * i + 1);
                h = g.conv2d(h, w, Some(bias), l.stride, l.padding)?;
                h = g.relu(h)?;
            }
            backbone = Some(h);
        }
        if entry <= Entry::Backbone {
            let vars = self.deform_vars(b, "es");
            h = if self.es_deformable() {
                let (out, off) = self.es.forward_bound(g, h, &vars)?;
                es_offsets = Some(off);
                out
            } else {
                g.conv2d(h, vars.weight, Some(vars.bias), 1, self.es.grid.same_padding())?
            };
            h = g.relu(h)?;
            if self.clip_active() {
                h = clip_features_graph(g, h, self.clip_beta)?;
            }
            clipped = Some(h);
        }
        let vars = self.deform_vars(b, "ss");
        h = if self.ss_deformable() {
            let (out, off) = self.ss.forward_bound(g, h, &vars)?;
            ss_offsets = Some(off);
            out
        } else {
            g.conv2d(h, vars.weight, Some(vars.bias), 1, self.ss.grid.same_padding())?
        };
        let features = g.relu(h)?;
        let evidence = g.conv2d(
            features,
            b.get(self.idx("head.weight")),
            Some(b.get(self.idx("head.bias"))),
            1,
            0,
        )?;
        let logits = g.global_avg_pool(evidence)?;
        Ok(Forward {
            backbone,
            clipped,
            features,
            evidence,
            logits,
            es_offsets,
            ss_offsets,
        })
    }

    /// Inference pass from raw images; returns the graph for inspection.
    pub fn run(&self, images: &Tensor) -> Result<(Graph, Forward)> {
        self.run_from(Entry::Image, images)
    }

    pub fn run_from(&self, entry: Entry, input: &Tensor) -> Result<(Graph, Forward)> {
        let mut g = Graph::new();
        let mut vars = Vec::new();
        for (name, t) in self.params() {
            let t = if name == "head.weight" { self.head.as_kernel() } else { t.clone() };
            vars.push(g.constant(t)?);
        }
        let b = Bindings { vars };
        let x = g.constant(input.clone())?;
        let f = self.forward(&mut g, &b, entry, x)?;
        Ok((g, f))
    }

    /// Last feature map before pooling, `[N,D,h,w]`.
    pub fn forward_features(&self, images: &Tensor) -> Result<Tensor> {
        let (g, f) = self.run(images)?;
        Ok(g.value(f.features).clone())
    }

    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let (g, f) = self.run(images)?;
        Ok(g.value(f.logits).clone())
    }

    /// Activations entering the forward pass at `entry`.
    pub fn prefix(&self, images: &Tensor, entry: Entry) -> Result<Tensor> {
        let (g, f) = self.run(images)?;
        match entry {
            Entry::Image => Ok(images.clone()),
            Entry::Backbone => Ok(g.value(f.backbone.expect("image entry")).clone()),
            Entry::Clipped => Ok(g.value(f.clipped.expect("image entry")).clone()),
        }
    }

    /// Write `manifest.txt`, `meta.txt` and one tensor file per parameter.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = String::new();
        for (i, (name, t)) in self.params().into_iter().enumerate() {
            let file = format!("{i:02}_{name}.tensor");
            write_tensor(&dir.join(&file), t)?;
            let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            manifest.push_str(&format!("{name}\t{}\t{file}\n", shape.join("x")));
        }
        let path = dir.join("manifest.txt");
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
        let c = &self.config;
        let widths: Vec<String> = c.widths.iter().map(|w| w.to_string()).collect();
        let meta = format!(
            "stage = {}\nclasses = {}\nin_channels = {}\nwidths = {}\nfeature_dim = {}\n\
             extra_kernel = {}\noffset_kernel = {}\nclip_beta = {}\nno_es = {}\nno_clip = {}\nno_ss = {}\n",
            self.stage,
            c.classes,
            c.in_channels,
            widths.join(","),
            c.feature_dim,
            c.extra_kernel,
            c.offset_kernel,
            self.clip_beta,
            self.ablation.no_es,
            self.ablation.no_clip,
            self.ablation.no_ss,
        );
        let path = dir.join("meta.txt");
        fs::write(&path, meta).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.txt");
        let meta = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let kv = crate::config::parse_pairs(&meta).map_err(|e| Error::Load(e.to_string()))?;
        let get = |k: &str| {
            kv.iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Load(format!("meta.txt lacks `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Load(format!("meta.txt: bad value for `{k}`")))
        };
        let flag = |k: &str| -> Result<bool> {
            get(k)?
                .parse()
                .map_err(|_| Error::Load(format!("meta.txt: bad value for `{k}`")))
        };
        let widths = get("widths")?
            .split(',')
            .map(|w| w.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::Load("meta.txt: bad widths".into()))?;
        let config = ModelConfig {
            classes: num("classes")?,
            in_channels: num("in_channels")?,
            widths,
            feature_dim: num("feature_dim")?,
            extra_kernel: num("extra_kernel")?,
            offset_kernel: num("offset_kernel")?,
        };
        config.validate().map_err(|e| Error::Load(e.to_string()))?;
        let stage = Stage::parse(get("stage")?).map_err(|e| Error::Load(e.to_string()))?;
        let clip_beta: f64 = get("clip_beta")?
            .parse()
            .map_err(|_| Error::Load("meta.txt: bad clip_beta".into()))?;

        // Shapes come from a freshly built model; values from the files.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut model = Model::build(&config, &mut rng)?;
        model.stage = stage;
        model.clip_beta = clip_beta;
        model.ablation = Ablation {
            no_es: flag("no_es")?,
            no_clip: flag("no_clip")?,
            no_ss: flag("no_ss")?,
        };
        model.es.freeze_regular = stage >= Stage::Expansion && !model.ablation.no_es;
        model.ss.freeze_regular = stage >= Stage::Shrinkage && !model.ablation.no_ss;

        let manifest_path = dir.join("manifest.txt");
        let manifest = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let names = model.param_names();
        let lines: Vec<&str> = manifest.lines().filter(|l| !l.trim().is_empty()).collect();
        if lines.len() != names.len() {
            return Err(Error::Load(format!(
                "manifest lists {} tensors, architecture has {}",
                lines.len(),
                names.len()
            )));
        }
        let mut loaded = Vec::new();
        for (line, name) in lines.iter().zip(&names) {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 || fields[0] != name {
                return Err(Error::Load(format!("manifest line `{line}` does not match `{name}`")));
            }
            loaded.push(read_tensor(&dir.join(fields[2]))?);
        }
        for (slot, t) in model.params_mut().into_iter().zip(loaded) {
            if slot.numel() != t.numel() {
                return Err(Error::Load(format!(
                    "tensor shape {:?} does not fit parameter shape {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            let shape = slot.shape().to_vec();
            *slot = t.reshape(&shape)?;
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelConfig {
        ModelConfig {
            classes: 3,
            in_channels: 3,
            widths: vec![4, 6, 8],
            feature_dim: 8,
            extra_kernel: 3,
            offset_kernel: 3,
        }
    }

    #[test]
    fn head_rows_match_classes_and_logit_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Model::build(&small(), &mut rng).unwrap();
        assert_eq!(m.head.classes(), 3);
        let logits = m.logits(&Tensor::zeros(&[1, 3, 64, 64])).unwrap();
        assert_eq!(logits.shape(), &[1, 3]);
        let f = m.forward_features(&Tensor::zeros(&[1, 3, 64, 64])).unwrap();
        assert!(f.is_finite());
        assert_eq!(f.shape(), &[1, 8, 8, 8]);
    }

    #[test]
    fn param_count_matches_closed_form() {
        let cfg = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Model::build(&cfg, &mut rng).unwrap();
        let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
        let d = 128;
        let expected = conv(3, 32, 3)
            + conv(32, 64, 3)
            + conv(64, 128, 3)
            + conv(128, d, 3)
            + 2 * conv(d, d, 3)
            + 2 * conv(d, 18, 3)
            + conv(d, 3, 1);
        assert_eq!(m.param_count(), expected);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut c = small();
        c.classes = 0;
        assert!(matches!(Model::build(&c, &mut rng), Err(Error::Config(_))));
        let mut c = small();
        c.extra_kernel = 2;
        assert!(Model::build(&c, &mut rng).is_err());
    }

    #[test]
    fn rewire_checks_stage_and_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = small();
        let base = Model::build(&cfg, &mut rng).unwrap();
        let exp = Model::rewire(&cfg, Stage::Expansion, &base, Ablation::default(), 0.15).unwrap();
        assert!(matches!(
            Model::rewire(&cfg, Stage::Shrinkage, &base, Ablation::default(), 0.15),
            Err(Error::Load(_))
        ));
        let mut other = cfg.clone();
        other.classes = 4;
        assert!(matches!(
            Model::rewire(&other, Stage::Expansion, &base, Ablation::default(), 0.15),
            Err(Error::Load(_))
        ));
        let again = Model::rewire(&cfg, Stage::Expansion, &base, Ablation::default(), 0.15).unwrap();
        assert_eq!(exp, again);
        assert!(exp.es.freeze_regular);
    }

    #[test]
    fn trainable_masks_per_stage() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = small();
        let base = Model::build(&cfg, &mut rng).unwrap();
        assert!(base.trainable("backbone.0.weight"));
        assert!(!base.trainable("es.offset.weight"));
        let exp = Model::rewire(&cfg, Stage::Expansion, &base, Ablation::default(), 0.15).unwrap();
        let train: Vec<_> = exp.param_names().into_iter().filter(|n| exp.trainable(n)).collect();
        assert_eq!(train, vec!["es.offset.weight", "es.offset.bias"]);
        assert_eq!(exp.frozen_entry(), Entry::Backbone);
        let shr = Model::rewire(&cfg, Stage::Shrinkage, &exp, Ablation::default(), 0.15).unwrap();
        let train: Vec<_> = shr.param_names().into_iter().filter(|n| shr.trainable(n)).collect();
        assert_eq!(train, vec!["ss.offset.weight", "ss.offset.bias"]);
        assert_eq!(shr.frozen_entry(), Entry::Clipped);
        let no_es = Ablation {
            no_es: true,
            ..Default::default()
        };
        let a = Model::rewire(&cfg, Stage::Expansion, &base, no_es, 0.15).unwrap();
        assert!(a.trainable("backbone.1.weight") && !a.trainable("head.weight"));
        assert_eq!(a.frozen_entry(), Entry::Image);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = small();
        let base = Model::build(&cfg, &mut rng).unwrap();
        let mut exp = Model::rewire(&cfg, Stage::Expansion, &base, Ablation::default(), 0.15).unwrap();
        exp.es.offset_bias.data_mut()[0] = 0.25;
        exp.save(dir.path()).unwrap();
        let back = Model::load(dir.path()).unwrap();
        assert_eq!(back, exp);
    }
}
