//! Patch embedding, token assembly and the joint space-time transformer.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::params::{Bound, Init, ModelParams, ParamGroup, ParamId};
use crate::tensor::{Graph, Result, Tensor, TensorError, Var};

/// Pixels in `[0, 1]` are mapped to `(p - PIXEL_MEAN) / PIXEL_STD` before projection.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub prompt_count: usize,
    /// 1-based block indices whose patch tokens feed the dense heads.
    pub tap_layers: Vec<usize>,
    pub downstream_classes: usize,
    /// FFN hidden width as a multiple of `embed_dim`.
    pub mlp_ratio: usize,
    pub init_std: f64,
    pub ln_eps: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            frames: 4,
            height: 32,
            width: 32,
            patch_h: 8,
            patch_w: 8,
            embed_dim: 64,
            layers: 8,
            heads: 4,
            prompt_count: 5,
            tap_layers: vec![1, 6, 8],
            downstream_classes: 8,
            mlp_ratio: 4,
            init_std: 0.02,
            ln_eps: 1e-5,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> std::result::Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError::Invalid(msg));
        let positive = [
            ("frames", self.frames),
            ("height", self.height),
            ("width", self.width),
            ("patch_h", self.patch_h),
            ("patch_w", self.patch_w),
            ("embed_dim", self.embed_dim),
            ("layers", self.layers),
            ("heads", self.heads),
            ("downstream_classes", self.downstream_classes),
            ("mlp_ratio", self.mlp_ratio),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return fail(format!("backbone.{name} must be positive"));
        }
        if !self.height.is_multiple_of(self.patch_h) || !self.width.is_multiple_of(self.patch_w) {
            return fail(format!(
                "frame {}x{} is not divisible into {}x{} patches",
                self.height, self.width, self.patch_h, self.patch_w
            ));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return fail(format!(
                "embed_dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            ));
        }
        if self.tap_layers.is_empty()
            || self.tap_layers.windows(2).any(|w| w[0] >= w[1])
            || self.tap_layers[0] < 1
            || *self.tap_layers.last().expect("nonempty") > self.layers
        {
            return fail(format!(
                "tap_layers {:?} must be strictly increasing within 1..={}",
                self.tap_layers, self.layers
            ));
        }
        if !(self.init_std > 0.0 && self.ln_eps > 0.0) {
            return fail("init_std and ln_eps must be positive".into());
        }
        Ok(())
    }

    /// Patch grid of one frame, `(rows, cols)`.
    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch_h, self.width / self.patch_w)
    }

    pub fn num_patches(&self) -> usize {
        let (gh, gw) = self.grid();
        self.frames * gh * gw
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_h * self.patch_w
    }

    pub fn video_shape(&self) -> [usize; 4] {
        [self.frames, 3, self.height, self.width]
    }
}

/// How task prompts enter the token sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptLayout {
    /// No prompt tokens.
    None,
    /// `prompt_count` learned rows of width `embed_dim`.
    PerTask,
    /// One learned vector of width `prompt_count · embed_dim`, mapped to a
    /// single token by a private projection.
    Single,
}

/// `[CLS | patches | prompts]` rows with their index ranges.
#[derive(Clone, Debug)]
pub struct TokenSequence {
    pub rows: Var,
    pub patch_count: usize,
    pub prompt_count: usize,
}

impl TokenSequence {
    pub const CLS_INDEX: usize = 0;

    pub fn len(&self) -> usize {
        1 + self.patch_count + self.prompt_count
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn patch_range(&self) -> Range<usize> {
        1..1 + self.patch_count
    }

    pub fn prompt_range(&self) -> Range<usize> {
        1 + self.patch_count..self.len()
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutputs {
    /// `[1, d]`
    pub f_cls: Var,
    /// `[prompt tokens, d]`, absent when the sequence has no prompts.
    pub f_prompts: Option<Var>,
    /// `[N, d]`
    pub f_patch_final: Var,
    /// Raw patch rows `[N, d]` after each tap layer.
    pub tapped: BTreeMap<usize, Var>,
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    qkv_w: ParamId,
    qkv_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

impl BlockParams {
    pub fn ids(&self) -> [ParamId; 12] {
        [
            self.ln1_gain,
            self.ln1_bias,
            self.qkv_w,
            self.qkv_b,
            self.out_w,
            self.out_b,
            self.ln2_gain,
            self.ln2_bias,
            self.fc1_w,
            self.fc1_b,
            self.fc2_w,
            self.fc2_b,
        ]
    }
}

/// Parameter handles and wiring of the transformer trunk.
#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    layout: PromptLayout,
    patch_proj: ParamId,
    pos_embed: ParamId,
    cls_token: ParamId,
    prompts: Option<ParamId>,
    prompt_proj: Option<ParamId>,
    blocks: Vec<BlockParams>,
    final_gain: ParamId,
    final_bias: ParamId,
}

impl Backbone {
    /// Registers the trunk's parameters on `params`.
    pub fn new(config: &BackboneConfig, layout: PromptLayout, params: &mut ModelParams) -> Self {
        let d = config.embed_dim;
        let std = Init::Normal(config.init_std);
        let ones = Init::Constant(1.0);
        let zeros = Init::Constant(0.0);
        let patch_proj = params.add("embed.patch_proj", ParamGroup::Embedder, &[config.patch_dim(), d], std);
        let pos_embed = params.add("embed.pos", ParamGroup::Embedder, &[config.num_patches(), d], std);
        let cls_token = params.add("cls_token", ParamGroup::ClsToken, &[1, d], std);
        let (prompts, prompt_proj) = match layout {
            PromptLayout::None => (None, None),
            PromptLayout::PerTask => (
                Some(params.add("prompts", ParamGroup::Prompts, &[config.prompt_count, d], std)),
                None,
            ),
            PromptLayout::Single => {
                let width = config.prompt_count * d;
                (
                    Some(params.add("prompts", ParamGroup::Prompts, &[1, width], std)),
                    Some(params.add("prompt_proj", ParamGroup::PromptProjection, &[width, d], std)),
                )
            }
        };
        let hidden = config.mlp_ratio * d;
        let blocks = (0..config.layers)
            .map(|l| {
                let mut add = |name: &str, shape: &[usize], init: Init| {
                    params.add(&format!("block{l}.{name}"), ParamGroup::Blocks, shape, init)
                };
                BlockParams {
                    ln1_gain: add("ln1.gain", &[d], ones),
                    ln1_bias: add("ln1.bias", &[d], zeros),
                    qkv_w: add("attn.qkv.w", &[d, 3 * d], std),
                    qkv_b: add("attn.qkv.b", &[3 * d], zeros),
                    out_w: add("attn.out.w", &[d, d], std),
                    out_b: add("attn.out.b", &[d], zeros),
                    ln2_gain: add("ln2.gain", &[d], ones),
                    ln2_bias: add("ln2.bias", &[d], zeros),
                    fc1_w: add("mlp.fc1.w", &[d, hidden], std),
                    fc1_b: add("mlp.fc1.b", &[hidden], zeros),
                    fc2_w: add("mlp.fc2.w", &[hidden, d], std),
                    fc2_b: add("mlp.fc2.b", &[d], zeros),
                }
            })
            .collect();
        let final_gain = params.add("final_ln.gain", ParamGroup::Blocks, &[d], ones);
        let final_bias = params.add("final_ln.bias", ParamGroup::Blocks, &[d], zeros);
        Self {
            config: config.clone(),
            layout,
            patch_proj,
            pos_embed,
            cls_token,
            prompts,
            prompt_proj,
            blocks,
            final_gain,
            final_bias,
        }
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn layout(&self) -> PromptLayout {
        self.layout
    }

    /// Number of prompt rows in the token sequence.
    pub fn prompt_tokens(&self) -> usize {
        match self.layout {
            PromptLayout::None => 0,
            PromptLayout::PerTask => self.config.prompt_count,
            PromptLayout::Single => 1,
        }
    }

    pub fn prompts(&self) -> Option<ParamId> {
        self.prompts
    }

    pub fn blocks(&self) -> &[BlockParams] {
        &self.blocks
    }

    pub(crate) fn remap(&mut self, map: &[Option<ParamId>]) {
        let m = |id: &mut ParamId| *id = map[id.index()].expect("backbone parameter kept");
        m(&mut self.patch_proj);
        m(&mut self.pos_embed);
        m(&mut self.cls_token);
        self.prompts.iter_mut().for_each(m);
        self.prompt_proj.iter_mut().for_each(m);
        for b in &mut self.blocks {
            for id in [
                &mut b.ln1_gain,
                &mut b.ln1_bias,
                &mut b.qkv_w,
                &mut b.qkv_b,
                &mut b.out_w,
                &mut b.out_b,
                &mut b.ln2_gain,
                &mut b.ln2_bias,
                &mut b.fc1_w,
                &mut b.fc1_b,
                &mut b.fc2_w,
                &mut b.fc2_b,
            ] {
                m(id);
            }
        }
        m(&mut self.final_gain);
        m(&mut self.final_bias);
    }

    /// `[N, 3·h·w]` matrix of normalized, flattened patches, frame-major then row-major
    /// within a frame; each row is channel-major over the patch pixels.
    pub fn patchify(&self, video: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        if video.shape() != c.video_shape() {
            return Err(TensorError::ShapeMismatch {
                op: "patchify",
                lhs: video.shape().to_vec(),
                rhs: c.video_shape().to_vec(),
            });
        }
        let (gh, gw) = c.grid();
        let v = video.data();
        let mut out = Vec::with_capacity(c.num_patches() * c.patch_dim());
        for t in 0..c.frames {
            for pr in 0..gh {
                for pc in 0..gw {
                    for ch in 0..3 {
                        for y in 0..c.patch_h {
                            let row = pr * c.patch_h + y;
                            let base = ((t * 3 + ch) * c.height + row) * c.width + pc * c.patch_w;
                            out.extend(v[base..base + c.patch_w].iter().map(|x| (x - PIXEL_MEAN) / PIXEL_STD));
                        }
                    }
                }
            }
        }
        Tensor::new(&[c.num_patches(), c.patch_dim()], out)
    }

    /// `z_i = E·x_i + PE_i` for every patch.
    pub fn patch_embed(&self, g: &mut Graph, bound: &Bound, video: &Tensor) -> Result<Var> {
        let patches = g.constant(self.patchify(video)?);
        let projected = g.matmul(patches, bound.var(self.patch_proj))?;
        g.add(projected, bound.var(self.pos_embed))
    }

    /// Prepends the CLS token and appends prompt rows after the patches.
    pub fn assemble_tokens(&self, g: &mut Graph, bound: &Bound, patches: Var) -> Result<TokenSequence> {
        let expected = [self.config.num_patches(), self.config.embed_dim];
        if g.shape(patches) != expected {
            return Err(TensorError::ShapeMismatch {
                op: "assemble_tokens",
                lhs: g.shape(patches).to_vec(),
                rhs: expected.to_vec(),
            });
        }
        let mut parts = vec![bound.var(self.cls_token), patches];
        match (self.layout, self.prompts) {
            (PromptLayout::PerTask, Some(p)) => parts.push(bound.var(p)),
            (PromptLayout::Single, Some(p)) => {
                let proj = self.prompt_proj.expect("single layout has a projection");
                parts.push(g.matmul(bound.var(p), bound.var(proj))?);
            }
            _ => {}
        }
        let rows = g.concat(&parts, 0)?;
        Ok(TokenSequence {
            rows,
            patch_count: self.config.num_patches(),
            prompt_count: self.prompt_tokens(),
        })
    }

    /// Pre-norm residual block with full self-attention over all tokens.
    ///
    /// Tokens from `unordered_from` on are the prompt rows; they carry no
    /// position and are treated as a set by the attention reductions.
    pub fn transformer_block(
        &self,
        g: &mut Graph,
        bound: &Bound,
        block: &BlockParams,
        x: Var,
        unordered_from: usize,
    ) -> Result<Var> {
        let d = self.config.embed_dim;
        let heads = self.config.heads;
        let dh = d / heads;
        if g.shape(x).len() != 2 || g.shape(x)[1] != d {
            return Err(TensorError::ShapeMismatch {
                op: "transformer_block",
                lhs: g.shape(x).to_vec(),
                rhs: vec![d],
            });
        }
        let eps = self.config.ln_eps;
        let h = g.layer_norm(x, bound.var(block.ln1_gain), bound.var(block.ln1_bias), eps)?;
        let qkv = g.linear(h, bound.var(block.qkv_w), bound.var(block.qkv_b))?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for head in 0..heads {
            let q = g.slice(qkv, 1, head * dh, dh)?;
            let k = g.slice(qkv, 1, d + head * dh, dh)?;
            let v = g.slice(qkv, 1, 2 * d + head * dh, dh)?;
            outs.push(g.attention(q, k, v, scale, unordered_from)?);
        }
        let attn = if heads == 1 { outs[0] } else { g.concat(&outs, 1)? };
        let proj = g.linear(attn, bound.var(block.out_w), bound.var(block.out_b))?;
        let x = g.add(x, proj)?;
        let h = g.layer_norm(x, bound.var(block.ln2_gain), bound.var(block.ln2_bias), eps)?;
        let h = g.linear(h, bound.var(block.fc1_w), bound.var(block.fc1_b))?;
        let h = g.gelu(h);
        let h = g.linear(h, bound.var(block.fc2_w), bound.var(block.fc2_b))?;
        g.add(x, h)
    }

    pub fn forward(&self, g: &mut Graph, bound: &Bound, video: &Tensor) -> Result<ForwardOutputs> {
        let patches = self.patch_embed(g, bound, video)?;
        let tokens = self.assemble_tokens(g, bound, patches)?;
        let n = tokens.patch_count;
        let unordered_from = tokens.prompt_range().start;
        let mut x = tokens.rows;
        let mut tapped = BTreeMap::new();
        for (l, block) in self.blocks.iter().enumerate() {
            x = self.transformer_block(g, bound, block, x, unordered_from)?;
            if self.config.tap_layers.contains(&(l + 1)) {
                tapped.insert(l + 1, g.slice(x, 0, 1, n)?);
            }
        }
        let x = g.layer_norm(
            x,
            bound.var(self.final_gain),
            bound.var(self.final_bias),
            self.config.ln_eps,
        )?;
        let f_cls = g.slice(x, 0, 0, 1)?;
        let f_patch_final = g.slice(x, 0, 1, n)?;
        let f_prompts = match tokens.prompt_count {
            0 => None,
            p => Some(g.slice(x, 0, 1 + n, p)?),
        };
        Ok(ForwardOutputs {
            f_cls,
            f_prompts,
            f_patch_final,
            tapped,
        })
    }

    /// Multiply-accumulate count of one forward pass through the trunk.
    pub fn forward_macs(&self) -> u64 {
        let c = &self.config;
        let d = c.embed_dim as u64;
        let n = c.num_patches() as u64;
        let s = 1 + n + self.prompt_tokens() as u64;
        let mut macs = n * c.patch_dim() as u64 * d;
        if self.layout == PromptLayout::Single {
            macs += (c.prompt_count as u64 * d) * d;
        }
        let hidden = c.mlp_ratio as u64 * d;
        let per_block = s * d * 3 * d + 2 * s * s * d + s * d * d + 2 * s * d * hidden;
        macs + c.layers as u64 * per_block
    }
}
