//! Encoder backbone, MLP heads, attention transforms and the per-setting
//! wiring of MLP and KNN logits.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::hierarchy::ClassHierarchy;
use crate::ndgrad::{Bound, Graph, ParamSet, Tensor, Var};
use crate::seed::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Setting {
    Supervised,
    Meta,
}

impl Setting {
    pub fn name(self) -> &'static str {
        match self {
            Setting::Supervised => "supervised",
            Setting::Meta => "meta",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    /// Cosine similarity of the transformed vectors.
    DotCosine,
    /// Negative Euclidean distance of the transformed vectors.
    NegEuclidean,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::DotCosine => "cosine",
            Metric::NegEuclidean => "euclidean",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EncoderConfig {
    /// Fully connected layers, each followed by ReLU. `widths` lists the
    /// hidden widths followed by the output dim.
    Mlp { input_dim: usize, widths: Vec<usize> },
    /// Four blocks of conv3x3 -> group norm -> ReLU -> maxpool2x2 over a
    /// single-channel `side × side` raster.
    Conv4 { side: usize, channels: [usize; 4] },
}

impl EncoderConfig {
    pub fn mlp(input_dim: usize, widths: Vec<usize>) -> Self {
        EncoderConfig::Mlp { input_dim, widths }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            EncoderConfig::Mlp { input_dim, .. } => *input_dim,
            EncoderConfig::Conv4 { side, .. } => side * side,
        }
    }

    /// Feature dimension `d`.
    pub fn output_dim(&self) -> usize {
        match self {
            EncoderConfig::Mlp { input_dim, widths } => widths.last().copied().unwrap_or(*input_dim),
            EncoderConfig::Conv4 { side, channels } => {
                let mut s = *side;
                for _ in 0..4 {
                    s /= 2;
                }
                channels[3] * s * s
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            EncoderConfig::Mlp { input_dim, widths } => {
                if *input_dim == 0 || widths.is_empty() || widths.contains(&0) {
                    return Err(Error::Config(format!("invalid mlp encoder {input_dim} -> {widths:?}")));
                }
            }
            EncoderConfig::Conv4 { side, channels } => {
                if *side < 16 || channels.contains(&0) {
                    return Err(Error::Config(format!("invalid conv4 encoder side={side} channels={channels:?}")));
                }
            }
        }
        Ok(())
    }
}

/// Which classifiers feed each head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Heads {
    pub coarse_mlp: bool,
    pub coarse_knn: bool,
    pub fine_mlp: bool,
    pub fine_knn: bool,
}

impl Heads {
    /// Supervised: coarse = MLP, fine = MLP + KNN.
    /// Meta: coarse = MLP + KNN, fine = KNN.
    pub fn for_setting(setting: Setting) -> Self {
        match setting {
            Setting::Supervised => Heads {
                coarse_mlp: true,
                coarse_knn: false,
                fine_mlp: true,
                fine_knn: true,
            },
            Setting::Meta => Heads {
                coarse_mlp: true,
                coarse_knn: true,
                fine_mlp: false,
                fine_knn: true,
            },
        }
    }

    /// Turns off the MLP or KNN half of whichever head combines both.
    pub fn ablate(mut self, setting: Setting, mlp: bool, knn: bool) -> Result<Self> {
        let (m, k) = match setting {
            Setting::Supervised => (&mut self.fine_mlp, &mut self.fine_knn),
            Setting::Meta => (&mut self.coarse_mlp, &mut self.coarse_knn),
        };
        if !mlp && !knn {
            return Err(Error::Config("cannot disable both the MLP and the KNN classifier".into()));
        }
        *m &= mlp;
        *k &= knn;
        Ok(self)
    }

    pub fn uses_knn(&self) -> bool {
        self.coarse_knn || self.fine_knn
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub setting: Setting,
    pub encoder: EncoderConfig,
    pub num_fine: usize,
    pub num_coarse: usize,
    pub heads: Heads,
    /// When false, both attention transforms are the identity.
    pub attention: bool,
    pub metric: Metric,
    /// Neighbors summed per class score.
    pub k: usize,
}

/// Model configuration plus every learnable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub params: ParamSet,
}

pub const ENCODER_PREFIX: &str = "enc.";
pub const COARSE_HEAD: &str = "coarse";
pub const FINE_HEAD: &str = "fine";
pub const ATTN_G: &str = "attn.g";
pub const ATTN_H: &str = "attn.h";

/// Group count for group normalization: the largest divisor of `channels`
/// not above 8 that keeps at least four elements per group.
pub fn gn_groups(channels: usize, spatial: usize) -> usize {
    (1..=channels.min(8))
        .rev()
        .find(|g| channels.is_multiple_of(*g) && (channels / g) * spatial >= 4)
        .unwrap_or(1)
}

fn uniform(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

impl ModelParams {
    /// Initializes weights uniformly in ±1/√fan_in; biases start at zero and
    /// the output normalization of each attention transform starts at zero so
    /// both transforms begin as the identity.
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.encoder.validate()?;
        if config.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        let mut p = ParamSet::new();
        match &config.encoder {
            EncoderConfig::Mlp { input_dim, widths } => {
                let mut fan_in = *input_dim;
                for (i, &w) in widths.iter().enumerate() {
                    p.insert(format!("enc.l{i}.w"), uniform(rng, &[fan_in, w], fan_in));
                    p.insert(format!("enc.l{i}.b"), Tensor::zeros(&[w]));
                    fan_in = w;
                }
            }
            EncoderConfig::Conv4 { channels, .. } => {
                let mut cin = 1;
                for (i, &c) in channels.iter().enumerate() {
                    p.insert(format!("enc.c{i}.w"), uniform(rng, &[c, cin, 3, 3], cin * 9));
                    p.insert(format!("enc.c{i}.b"), Tensor::zeros(&[c]));
                    p.insert(format!("enc.c{i}.gamma"), Tensor::vector(vec![1.0; c]));
                    p.insert(format!("enc.c{i}.beta"), Tensor::zeros(&[c]));
                    cin = c;
                }
            }
        }
        let d = config.encoder.output_dim();
        if config.heads.coarse_mlp {
            p.insert("coarse.w", uniform(rng, &[d, config.num_coarse], d));
            p.insert("coarse.b", Tensor::zeros(&[config.num_coarse]));
        }
        if config.heads.fine_mlp {
            p.insert("fine.w", uniform(rng, &[d, config.num_fine], d));
            p.insert("fine.b", Tensor::zeros(&[config.num_fine]));
        }
        if config.attention && config.heads.uses_knn() {
            for prefix in [ATTN_G, ATTN_H] {
                p.insert(format!("{prefix}.w1"), uniform(rng, &[d, d], d));
                p.insert(format!("{prefix}.b1"), Tensor::zeros(&[d]));
                p.insert(format!("{prefix}.w2"), uniform(rng, &[d, d], d));
                p.insert(format!("{prefix}.b2"), Tensor::zeros(&[d]));
                p.insert(format!("{prefix}.gamma"), Tensor::zeros(&[d]));
                p.insert(format!("{prefix}.beta"), Tensor::zeros(&[d]));
            }
        }
        Ok(Self { config, params: p })
    }

    pub fn feature_dim(&self) -> usize {
        self.config.encoder.output_dim()
    }

    /// Names of the encoder and MLP head tensors, the ones frozen during
    /// supervised fine-tuning.
    pub fn is_backbone(name: &str) -> bool {
        name.starts_with(ENCODER_PREFIX) || name.starts_with("coarse.") || name.starts_with("fine.")
    }

    pub fn is_attention(name: &str) -> bool {
        name.starts_with("attn.")
    }

    // ---- graph builders ---------------------------------------------------

    /// Encodes a batch `x` (`B × input_dim`) into `B × d` features.
    pub fn encode(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        let (rows, cols) = g.value(x).rows_cols();
        if cols != self.config.encoder.input_dim() || g.shape(x).len() != 2 {
            return Err(Error::shape("encode", g.shape(x), &[rows, self.config.encoder.input_dim()]));
        }
        match &self.config.encoder {
            EncoderConfig::Mlp { widths, .. } => {
                let mut h = x;
                for i in 0..widths.len() {
                    let w = b.get(&format!("enc.l{i}.w"))?;
                    let bias = b.get(&format!("enc.l{i}.b"))?;
                    let z = g.matmul(h, w)?;
                    let z = g.add_bias(z, bias)?;
                    h = g.relu(z)?;
                }
                Ok(h)
            }
            EncoderConfig::Conv4 { side, .. } => {
                let mut h = g.reshape(x, &[rows, 1, *side, *side])?;
                for i in 0..4 {
                    let w = b.get(&format!("enc.c{i}.w"))?;
                    let bias = b.get(&format!("enc.c{i}.b"))?;
                    let z = g.conv2d(h, w, bias, 1, 1)?;
                    let s = g.shape(z).to_vec();
                    let groups = gn_groups(s[1], s[2] * s[3]);
                    let gamma = b.get(&format!("enc.c{i}.gamma"))?;
                    let beta = b.get(&format!("enc.c{i}.beta"))?;
                    let z = g.group_norm(z, gamma, beta, groups)?;
                    let z = g.relu(z)?;
                    h = g.max_pool2d(z)?;
                }
                let d = self.feature_dim();
                g.reshape(h, &[rows, d])
            }
        }
    }

    /// Affine head `f·W + c`.
    pub fn mlp_logits(&self, g: &mut Graph, b: &Bound, head: &str, f: Var) -> Result<Var> {
        let w = b.get(&format!("{head}.w"))?;
        let c = b.get(&format!("{head}.b"))?;
        let z = g.matmul(f, w)?;
        g.add_bias(z, c)
    }

    /// `f + GN(relu(f·W1 + b1)·W2 + b2)`; the identity when attention is off.
    pub fn transform(&self, g: &mut Graph, b: &Bound, prefix: &str, f: Var) -> Result<Var> {
        if !self.config.attention {
            return Ok(f);
        }
        let p = |s: &str| b.get(&format!("{prefix}.{s}"));
        let z = g.matmul(f, p("w1")?)?;
        let z = g.add_bias(z, p("b1")?)?;
        let z = g.relu(z)?;
        let z = g.matmul(z, p("w2")?)?;
        let z = g.add_bias(z, p("b2")?)?;
        let d = g.value(z).rows_cols().1;
        let z = g.group_norm(z, p("gamma")?, p("beta")?, gn_groups(d, 1))?;
        g.add(f, z)
    }

    /// Attention scores between every query row and every slot row.
    pub fn knn_scores(&self, g: &mut Graph, b: &Bound, f: Var, slots: Var) -> Result<Var> {
        let gf = self.transform(g, b, ATTN_G, f)?;
        let hs = self.transform(g, b, ATTN_H, slots)?;
        match self.config.metric {
            Metric::DotCosine => {
                let gf = g.l2_normalize_rows(gf)?;
                let hs = g.l2_normalize_rows(hs)?;
                let ht = g.transpose(hs)?;
                g.matmul(gf, ht)
            }
            Metric::NegEuclidean => {
                let d2 = g.sq_dist(gf, hs)?;
                let d = g.sqrt(d2)?;
                g.neg(d)
            }
        }
    }

    /// Runs both heads for a batch of raw inputs against a slot layout.
    ///
    /// `hierarchy` defines the columns of the outputs: fine logits are
    /// `B × num_fine` and coarse logits `B × num_coarse`. When the hierarchy is
    /// a task-local restriction, `coarse_cols` maps local coarse ids to the
    /// columns of the global coarse MLP head and `fine_cols` does the same for
    /// the fine MLP head.
    pub fn forward_full(
        &self,
        g: &mut Graph,
        b: &Bound,
        x: Var,
        memory: Option<&SlotLayout>,
        view: &HeadView<'_>,
    ) -> Result<Forward> {
        let f = self.encode(g, b, x)?;
        self.forward_features(g, b, f, memory, view)
    }

    /// Same as [`forward_full`](Self::forward_full) starting from features.
    pub fn forward_features(
        &self,
        g: &mut Graph,
        b: &Bound,
        f: Var,
        memory: Option<&SlotLayout>,
        view: &HeadView<'_>,
    ) -> Result<Forward> {
        let heads = self.config.heads;
        let h = view.hierarchy;
        let scores = if heads.uses_knn() {
            let mem = memory.ok_or_else(|| Error::invalid("a KNN head is active but no memory was supplied"))?;
            if mem.fine_groups.len() != h.num_fine() {
                return Err(Error::shape("forward_full", &[mem.fine_groups.len()], &[h.num_fine()]));
            }
            Some(self.knn_scores(g, b, f, mem.slots)?)
        } else {
            None
        };

        let mut fine_parts = Vec::new();
        let mut fine_knn = None;
        if heads.fine_mlp {
            let z = self.mlp_logits(g, b, FINE_HEAD, f)?;
            fine_parts.push(match view.fine_cols {
                Some(cols) => g.gather_cols(z, cols)?,
                None => z,
            });
        }
        if heads.fine_knn {
            let mem = memory.expect("checked above");
            let z = g.top_k_group_sum(scores.unwrap(), &mem.fine_groups, self.config.k)?;
            fine_knn = Some(z);
            fine_parts.push(z);
        }

        let mut coarse_parts = Vec::new();
        if heads.coarse_mlp {
            let z = self.mlp_logits(g, b, COARSE_HEAD, f)?;
            coarse_parts.push(match view.coarse_cols {
                Some(cols) => g.gather_cols(z, cols)?,
                None => z,
            });
        }
        if heads.coarse_knn {
            let groups = coarse_groups(memory.expect("checked above"), h);
            coarse_parts.push(g.top_k_group_sum(scores.unwrap(), &groups, self.config.k)?);
        }
        if fine_parts.is_empty() || coarse_parts.is_empty() {
            return Err(Error::Config("both heads need at least one classifier".into()));
        }
        Ok(Forward {
            features: f,
            fine: combine_logits(g, &fine_parts)?,
            coarse: combine_logits(g, &coarse_parts)?,
            scores,
            fine_knn,
        })
    }

    /// Tape-free batch encoding.
    pub fn encode_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g);
        let xv = g.constant(x.clone());
        let f = self.encode(&mut g, &b, xv)?;
        Ok(g.value(f).clone())
    }
}

/// Column layout of the output heads for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct HeadView<'a> {
    pub hierarchy: &'a ClassHierarchy,
    pub fine_cols: Option<&'a [usize]>,
    pub coarse_cols: Option<&'a [usize]>,
}

impl<'a> HeadView<'a> {
    pub fn global(hierarchy: &'a ClassHierarchy) -> Self {
        Self {
            hierarchy,
            fine_cols: None,
            coarse_cols: None,
        }
    }
}

/// Slots on the tape plus which slot columns belong to each fine class.
#[derive(Debug, Clone)]
pub struct SlotLayout {
    pub slots: Var,
    pub fine_groups: Vec<Vec<usize>>,
}

/// Coarse groups are the union of the slots of each coarse class's fine children.
pub fn coarse_groups(mem: &SlotLayout, h: &ClassHierarchy) -> Vec<Vec<usize>> {
    (0..h.num_coarse())
        .map(|z| {
            let mut cols: Vec<usize> = h
                .children(z)
                .expect("z in range")
                .iter()
                .flat_map(|&y| mem.fine_groups[y].iter().copied())
                .collect();
            cols.sort_unstable();
            cols
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub features: Var,
    pub fine: Var,
    pub coarse: Var,
    /// Query × slot attention scores, when a KNN head ran.
    pub scores: Option<Var>,
    /// Fine KNN class scores before combination.
    pub fine_knn: Option<Var>,
}

/// Elementwise sum of equally shaped logit tensors.
pub fn combine_logits(g: &mut Graph, parts: &[Var]) -> Result<Var> {
    let (&first, rest) = parts
        .split_first()
        .ok_or_else(|| Error::invalid("combine_logits needs at least one part"))?;
    let mut acc = first;
    for &p in rest {
        acc = g.add(acc, p)?;
    }
    Ok(acc)
}
