//! The re-identification network: a convolutional extractor followed by an
//! identity head, a stripe-position head and per-stripe matching heads.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    avg_pool_global, avg_pool_striped, conv_output_size, BatchNorm2d, BatchStats, Binder, BnMode, Conv2d,
    GroupSet, InstanceNorm2d, Linear, Param, ParamGroup, StatsSelection,
};
use crate::math::Float;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Architecture of the network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub in_channels: usize,
    /// Output channels per conv block; the last entry is the feature width.
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    /// Whether each block's output passes through instance norm.
    pub instance_norm: Vec<bool>,
    pub kernel: usize,
    pub padding: usize,
    pub conv_bias: bool,
    pub in_affine: bool,
    pub stripes: usize,
    /// Width of the per-stripe matching embedding.
    pub part_dim: usize,
    pub num_ids: usize,
    /// Batch norm after each matching-head embedding.
    pub head_bn: bool,
    /// Feed the positioning head the matching embedding instead of the
    /// pooled stripe feature.
    pub pos_on_embedding: bool,
    pub bn_eps: Float,
    pub bn_momentum: Float,
    pub in_eps: Float,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_height: 23,
            image_width: 11,
            in_channels: 3,
            channels: vec![8, 16, 32, 64],
            strides: vec![1, 2, 1, 1],
            instance_norm: vec![true, true, false, false],
            kernel: 3,
            padding: 1,
            conv_bias: false,
            in_affine: true,
            stripes: 6,
            part_dim: 32,
            num_ids: 64,
            head_bn: true,
            pos_on_embedding: false,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            in_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// Output size `(height, width)` of every block, checking that each
    /// stage divides exactly and the final height splits into stripes.
    pub fn block_sizes(&self) -> Result<Vec<(usize, usize)>> {
        let blocks = self.channels.len();
        if blocks == 0 || self.strides.len() != blocks || self.instance_norm.len() != blocks {
            return Err(Error::Config(format!(
                "channels, strides and instance_norm must have one equal, non-zero length (got {}, {}, {})",
                blocks,
                self.strides.len(),
                self.instance_norm.len()
            )));
        }
        if self.stripes == 0 || self.part_dim == 0 || self.num_ids == 0 || self.in_channels == 0 {
            return Err(Error::Config("stripes, part_dim, num_ids and in_channels must be positive".into()));
        }
        let (mut h, mut w) = (self.image_height, self.image_width);
        let mut sizes = Vec::with_capacity(blocks);
        for &s in &self.strides {
            h = conv_output_size(h, self.kernel, s, self.padding)?;
            w = conv_output_size(w, self.kernel, s, self.padding)?;
            sizes.push((h, w));
        }
        if h % self.stripes != 0 {
            return Err(Error::Config(format!(
                "feature height {h} is not divisible by {} stripes",
                self.stripes
            )));
        }
        Ok(sizes)
    }

    /// `(channels, height, width)` of the extractor output.
    pub fn feature_shape(&self) -> Result<(usize, usize, usize)> {
        let sizes = self.block_sizes()?;
        let (h, w) = sizes[sizes.len() - 1];
        Ok((self.channels[self.channels.len() - 1], h, w))
    }
}

/// conv → BN → ReLU, optionally followed by IN on the block output.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub inorm: Option<InstanceNorm2d>,
    pub bn: BatchNorm2d,
}

/// Per-stripe matching head: 1×1 embedding, optional BN, identity classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct PartHead {
    pub embed: Conv2d,
    pub bn: Option<BatchNorm2d>,
    pub classifier: Linear,
}

/// Network plus configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    config: ModelConfig,
    pub blocks: Vec<ConvBlock>,
    pub head_id: Linear,
    pub head_pos: Linear,
    pub head_parts: Vec<PartHead>,
}

/// Tape handles of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[B, C, Hf, Wf]`.
    pub feature_map: Var,
    /// `[B, C]`.
    pub global: Var,
    /// `[B, H, C]`, stripes top to bottom.
    pub parts: Var,
    /// `[B, H, C_l]`.
    pub part_embeddings: Var,
    /// `[B, M]`.
    pub logits_id: Var,
    /// `[(B·H), H]`, rows sample-major.
    pub logits_pos: Var,
    /// `[B, H, M]`.
    pub logits_mat: Var,
    /// Post-affine output of every BN layer, in [`ModelBundle::bn_layers`] order.
    pub bn_outputs: Vec<Var>,
}

impl ModelBundle {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.block_sizes()?;
        let mut blocks = Vec::with_capacity(config.channels.len());
        let mut inputs = config.in_channels;
        for (i, (&out, &stride)) in config.channels.iter().zip(&config.strides).enumerate() {
            let name = format!("block{i}");
            let conv = Conv2d::new(
                &format!("{name}.conv"),
                inputs,
                out,
                config.kernel,
                stride,
                config.padding,
                config.conv_bias,
                rng,
            )?;
            let inorm = config.instance_norm[i]
                .then(|| InstanceNorm2d::new(&format!("{name}.in"), out, config.in_eps, config.in_affine));
            let bn = BatchNorm2d::new(&format!("{name}.bn"), out, config.bn_eps, config.bn_momentum)?;
            blocks.push(ConvBlock { conv, inorm, bn });
            inputs = out;
        }
        let feat = inputs;
        let head_id = Linear::new("head_g", ParamGroup::FcHeads, feat, config.num_ids, rng)?;
        let pos_in = if config.pos_on_embedding { config.part_dim } else { feat };
        let head_pos = Linear::new("head_p", ParamGroup::FcHeads, pos_in, config.stripes, rng)?;
        let mut head_parts = Vec::with_capacity(config.stripes);
        for h in 0..config.stripes {
            let name = format!("head_m{h}");
            let embed = Conv2d::new(&format!("{name}.conv"), feat, config.part_dim, 1, 1, 0, true, rng)?;
            let bn = if config.head_bn {
                Some(BatchNorm2d::new(
                    &format!("{name}.bn"),
                    config.part_dim,
                    config.bn_eps,
                    config.bn_momentum,
                )?)
            } else {
                None
            };
            let classifier = Linear::new(&format!("{name}.fc"), ParamGroup::FcHeads, config.part_dim, config.num_ids, rng)?;
            head_parts.push(PartHead { embed, bn, classifier });
        }
        Ok(ModelBundle {
            config,
            blocks,
            head_id,
            head_pos,
            head_parts,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Every batch-norm layer: extractor blocks shallow to deep, then the
    /// matching heads in stripe order.
    pub fn bn_layers(&self) -> Vec<&BatchNorm2d> {
        self.blocks
            .iter()
            .map(|b| &b.bn)
            .chain(self.head_parts.iter().filter_map(|p| p.bn.as_ref()))
            .collect()
    }

    pub fn bn_layers_mut(&mut self) -> Vec<&mut BatchNorm2d> {
        self.blocks
            .iter_mut()
            .map(|b| &mut b.bn)
            .chain(self.head_parts.iter_mut().filter_map(|p| p.bn.as_mut()))
            .collect()
    }

    /// Name prefix of BN layer `index` (e.g. `block3.bn`).
    pub fn bn_layer_name(&self, index: usize) -> Option<String> {
        self.bn_layers().get(index).map(|bn| {
            let name = &bn.state.gamma.name;
            String::from(name.strip_suffix(".gamma").unwrap_or(name))
        })
    }

    /// Index of the deepest extractor BN layer.
    pub fn last_extractor_bn(&self) -> usize {
        self.blocks.len() - 1
    }

    pub fn set_bn_mode(&mut self, mode: BnMode) {
        self.bn_layers_mut().into_iter().for_each(|bn| bn.state.mode = mode);
    }

    pub fn set_tta_update(&mut self, selection: StatsSelection) {
        self.bn_layers_mut()
            .into_iter()
            .for_each(|bn| bn.state.tta_update = selection);
    }

    /// Every parameter and running statistic, in a fixed order.
    pub fn params(&self) -> Vec<&Param> {
        let mut out: Vec<&Param> = Vec::new();
        for b in &self.blocks {
            out.extend(b.conv.params());
            if let Some(n) = &b.inorm {
                out.extend(n.params());
            }
            out.extend(b.bn.params());
        }
        out.extend(self.head_id.params());
        out.extend(self.head_pos.params());
        for p in &self.head_parts {
            out.extend(p.embed.params());
            if let Some(bn) = &p.bn {
                out.extend(bn.params());
            }
            out.extend(p.classifier.params());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = Vec::new();
        for b in &mut self.blocks {
            out.extend(b.conv.params_mut());
            if let Some(n) = &mut b.inorm {
                out.extend(n.params_mut());
            }
            out.extend(b.bn.params_mut());
        }
        out.extend(self.head_id.params_mut());
        out.extend(self.head_pos.params_mut());
        for p in &mut self.head_parts {
            out.extend(p.embed.params_mut());
            if let Some(bn) = &mut p.bn {
                out.extend(bn.params_mut());
            }
            out.extend(p.classifier.params_mut());
        }
        out
    }

    /// Parameters whose group is in `groups`.
    pub fn select_params(&self, groups: GroupSet) -> Vec<&Param> {
        self.params().into_iter().filter(|p| groups.contains(p.group)).collect()
    }

    /// [`ModelBundle::select_params`] from group names.
    pub fn select_params_by_name(&self, names: &[&str]) -> Result<Vec<&Param>> {
        let groups = names
            .iter()
            .map(|n| ParamGroup::parse(n))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.select_params(GroupSet::from_groups(&groups)))
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params().into_iter().find(|p| p.name == name)
    }

    /// Replace a tensor by name, checking its shape.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params_mut()
            .into_iter()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::Format(format!("unknown tensor {name}")))?;
        if slot.value.shape() != value.shape() {
            return Err(Error::Format(format!(
                "tensor {name}: shape {:?} does not match the architecture's {:?}",
                value.shape(),
                slot.value.shape()
            )));
        }
        slot.value = value;
        Ok(())
    }

    /// Move gradients recorded on `tape` into the bound parameters.
    pub fn absorb_grads(&mut self, tape: &Tape, binder: &Binder) -> Result<()> {
        let mut params = self.params_mut();
        for (name, var) in binder.bound() {
            let Some(g) = tape.grad(*var) else { continue };
            let p = params
                .iter_mut()
                .find(|p| &p.name == name)
                .ok_or_else(|| Error::contract("absorb_grads", format!("unknown parameter {name}")))?;
            p.value.accumulate_grad(g)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.params_mut().into_iter().for_each(|p| p.value.zero_grad());
    }

    /// Forward pass with every BN layer in `mode`; running statistics absorb
    /// the batch statistics when the mode calls for it.
    pub fn forward(&mut self, tape: &mut Tape, binder: &mut Binder, x: Var, mode: BnMode) -> Result<ForwardOutput> {
        self.set_bn_mode(mode);
        let (out, stats) = self.run(mode, tape, binder, x)?;
        for (bn, s) in self.bn_layers_mut().into_iter().zip(stats) {
            if let Some(s) = s {
                bn.commit(&s);
            }
        }
        Ok(out)
    }

    /// Read-only forward pass on running statistics.
    pub fn forward_eval(&self, tape: &mut Tape, binder: &mut Binder, x: Var) -> Result<ForwardOutput> {
        Ok(self.run(BnMode::Eval, tape, binder, x)?.0)
    }

    fn run(
        &self,
        mode: BnMode,
        tape: &mut Tape,
        binder: &mut Binder,
        x: Var,
    ) -> Result<(ForwardOutput, Vec<Option<BatchStats>>)> {
        let cfg = &self.config;
        let shape = tape.shape(x).to_vec();
        let expected = [cfg.in_channels, cfg.image_height, cfg.image_width];
        if shape.len() != 4 || shape[1..] != expected {
            return Err(Error::Config(format!(
                "input batch {shape:?} does not match the configured [B, {}, {}, {}]",
                expected[0], expected[1], expected[2]
            )));
        }
        let batch = shape[0];
        let stripes = cfg.stripes;
        let mut stats = Vec::new();
        let mut bn_outputs = Vec::new();

        let mut h = x;
        for block in &self.blocks {
            h = block.conv.forward(tape, binder, h)?;
            let (y, s) = block.bn.forward_in(mode, tape, binder, h)?;
            stats.push(s);
            bn_outputs.push(y);
            h = tape.relu(y);
            if let Some(n) = &block.inorm {
                h = n.forward(tape, binder, h)?;
            }
        }
        let feature_map = h;
        let c = tape.shape(feature_map)[1];
        let global = avg_pool_global(tape, feature_map)?;
        let logits_id = self.head_id.forward(tape, binder, global)?;
        let parts = avg_pool_striped(tape, feature_map, stripes)?;
        let flat_parts = tape.reshape(parts, &[batch * stripes, c])?;

        let mut embeds = Vec::with_capacity(stripes);
        let mut part_logits = Vec::with_capacity(stripes);
        for (s, head) in self.head_parts.iter().enumerate() {
            let rows: Vec<usize> = (0..batch).map(|b| b * stripes + s).collect();
            let f = tape.index_select(flat_parts, &rows)?;
            let f = tape.reshape(f, &[batch, c, 1, 1])?;
            let mut e = head.embed.forward(tape, binder, f)?;
            if let Some(bn) = &head.bn {
                let (y, st) = bn.forward_in(mode, tape, binder, e)?;
                stats.push(st);
                bn_outputs.push(y);
                e = y;
            }
            let e = tape.reshape(e, &[batch, cfg.part_dim])?;
            part_logits.push(head.classifier.forward(tape, binder, e)?);
            embeds.push(e);
        }
        // Stripe-major concatenation reordered to sample-major rows.
        let sample_major: Vec<usize> = (0..batch * stripes)
            .map(|r| (r % stripes) * batch + r / stripes)
            .collect();
        let stacked = tape.concat(&embeds)?;
        let emb_rows = tape.index_select(stacked, &sample_major)?;
        let part_embeddings = tape.reshape(emb_rows, &[batch, stripes, cfg.part_dim])?;
        let stacked = tape.concat(&part_logits)?;
        let mat_rows = tape.index_select(stacked, &sample_major)?;
        let logits_mat = tape.reshape(mat_rows, &[batch, stripes, cfg.num_ids])?;

        let pos_input = if cfg.pos_on_embedding {
            tape.reshape(part_embeddings, &[batch * stripes, cfg.part_dim])?
        } else {
            flat_parts
        };
        let logits_pos = self.head_pos.forward(tape, binder, pos_input)?;

        Ok((
            ForwardOutput {
                feature_map,
                global,
                parts,
                part_embeddings,
                logits_id,
                logits_pos,
                logits_mat,
                bn_outputs,
            },
            stats,
        ))
    }
}
