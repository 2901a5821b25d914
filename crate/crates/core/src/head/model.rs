//! The decoupled regression head.
//!
//! Four masked transformer blocks run over the RoI tokens. After blocks 1–3 a
//! branch (reshape to a `d_model×grid×grid` map, 3×3 conv + GELU layers, global pooling,
//! linear) predicts one component group; the accumulated delta is turned into
//! an activation mask that gates the following blocks. Block 4 feeds the
//! classifier.

use rand::Rng;

use crate::attention::{transformer_block, BlockParams, Linear, MaskTargets};
use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{
    decode_delta, mask_from_delta, soft_mask_with_jacobian, ActivationMask, BoxDelta,
    HorizontalBox, OrientedBox,
};
use crate::tensor::Tensor;

use super::config::{ComponentGroup, HeadConfig, MaskGradient, BLOCKS};

#[derive(Debug, Clone)]
struct Branch {
    convs: Vec<(ParamId, ParamId)>,
    fc: Linear,
    /// Components written, in output-column order, as `[dx, dy, dw, dh, dalpha]` indices.
    components: Vec<usize>,
    /// Block (0-based) whose output the branch reads.
    block: usize,
}

impl Branch {
    fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        convs: usize,
        outputs: usize,
        components: Vec<usize>,
        block: usize,
        rng: &mut R,
    ) -> Self {
        let convs = (0..convs)
            .map(|i| {
                let fan_in = d_model * 9;
                let w = store.add_uniform(
                    format!("{name}.conv{i}.weight"),
                    &[d_model, d_model, 3, 3],
                    fan_in,
                    rng,
                );
                let b = store.add_uniform(format!("{name}.conv{i}.bias"), &[d_model], fan_in, rng);
                (w, b)
            })
            .collect();
        let fc = Linear::new(store, &format!("{name}.fc"), d_model, outputs, rng);
        Self {
            convs,
            fc,
            components,
            block,
        }
    }

    fn forward<'p>(
        &self,
        tape: &mut Tape<'p>,
        store: &'p ParamStore,
        tokens: Var,
        grid: usize,
    ) -> Result<Var> {
        let d = tape.shape(tokens)[1];
        let t = tape.transpose(tokens)?;
        let mut x = tape.reshape(t, &[d, grid, grid])?;
        for &(w, b) in &self.convs {
            let w = tape.param(store, w);
            let b = tape.param(store, b);
            x = tape.conv2d_3x3(x, w, b)?;
            x = tape.gelu(x);
        }
        let pooled = tape.global_avg_pool(x)?;
        let pooled = tape.reshape(pooled, &[1, d])?;
        self.fc.forward(tape, store, pooled)
    }
}

/// Parameter handles of one head instance.
#[derive(Debug, Clone)]
pub struct StdHead {
    config: HeadConfig,
    embed: Linear,
    position: ParamId,
    blocks: Vec<BlockParams>,
    branches: Vec<Branch>,
    classifier: Branch,
}

/// Result of one head forward pass; variables live on the tape that produced it.
#[derive(Debug, Clone)]
pub struct HeadOutput {
    pub delta: BoxDelta,
    pub class_logits: Vec<f64>,
    /// Masks fed to blocks 2, 3 and 4.
    pub stage_masks: Vec<ActivationMask>,
    /// Accumulated delta after blocks 1, 2 and 3; unpredicted components are 0.
    pub stage_partials: Vec<BoxDelta>,
    /// Prediction of each component group (`[1×k]`), indexed by [`ComponentGroup::index`].
    pub group_vars: [Var; 3],
    pub logits_var: Var,
}

impl StdHead {
    pub fn new<R: Rng>(config: HeadConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let n = config.tokens();
        let embed = Linear::new(store, "embed", config.token_dim, d, rng);
        let position = store.add_uniform("position", &[n, d], d, rng);
        let blocks = (0..BLOCKS)
            .map(|i| BlockParams::new(store, &format!("blocks.{i}"), d, config.heads, rng))
            .collect::<Result<Vec<_>>>()?;
        let branches = match config.coupled_stage {
            Some(stage) => vec![Branch::new(
                store,
                "branch.coupled",
                d,
                config.conv_counts[0],
                5,
                vec![0, 1, 2, 3, 4],
                stage - 1,
                rng,
            )],
            None => config
                .decoupling_order
                .0
                .iter()
                .enumerate()
                .map(|(stage, group)| {
                    let comps = group.components().to_vec();
                    Branch::new(
                        store,
                        &format!("branch.{group}"),
                        d,
                        config.conv_counts[stage],
                        comps.len(),
                        comps,
                        stage,
                        rng,
                    )
                })
                .collect(),
        };
        let classifier = Branch::new(
            store,
            "branch.cls",
            d,
            config.class_convs,
            config.logits(),
            vec![],
            BLOCKS - 1,
            rng,
        );
        Ok(Self {
            config,
            embed,
            position,
            blocks,
            branches,
            classifier,
        })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    /// Final linear maps of the regression branches, in stage order.
    pub fn regression_outputs(&self) -> Vec<Linear> {
        self.branches.iter().map(|b| b.fc).collect()
    }

    pub fn classifier_output(&self) -> Linear {
        self.classifier.fc
    }

    /// Every parameter owned by the branch predicting `group`.
    pub fn branch_params(&self, group: ComponentGroup) -> Vec<ParamId> {
        let comp = group.components()[0];
        self.branches
            .iter()
            .filter(|b| b.components.contains(&comp))
            .flat_map(|b| {
                b.convs
                    .iter()
                    .flat_map(|&(w, bias)| [w, bias])
                    .chain([b.fc.weight, b.fc.bias])
            })
            .collect()
    }

    pub fn blocks(&self) -> &[BlockParams] {
        &self.blocks
    }

    fn mask_var<'p>(
        &self,
        tape: &mut Tape<'p>,
        delta_vars: &[Option<Var>; 5],
        partial: &BoxDelta,
        proposal: &HorizontalBox,
    ) -> Result<(Var, ActivationMask)> {
        let g = self.config.grid;
        let n = g * g;
        let mask = mask_from_delta(partial, proposal, g, g)?;
        let value = Tensor::new(&[n, 1], mask.values.clone())?;
        let var = match self.config.mask_gradient {
            MaskGradient::Detached => tape.constant(value),
            MaskGradient::StraightThrough { sharpness } => {
                let zero = tape.constant(Tensor::zeros(&[1, 1]));
                let parts: Vec<Var> = delta_vars.iter().map(|v| v.unwrap_or(zero)).collect();
                let delta = tape.concat_cols(&parts)?;
                let (_, jac) = soft_mask_with_jacobian(partial, proposal, g, g, sharpness);
                tape.with_jacobian(delta, value, jac)?
            }
        };
        Ok((var, mask))
    }

    pub fn forward<'p>(
        &self,
        tape: &mut Tape<'p>,
        store: &'p ParamStore,
        roi_tokens: &Tensor,
        proposal: &HorizontalBox,
    ) -> Result<HeadOutput> {
        let cfg = &self.config;
        let g = cfg.grid;
        let n = cfg.tokens();
        if roi_tokens.shape() != [n, cfg.token_dim] {
            return Err(Error::Shape {
                op: "forward_head",
                lhs: vec![n, cfg.token_dim],
                rhs: roi_tokens.shape().to_vec(),
            });
        }
        proposal.validate()?;

        let tokens = tape.constant(roi_tokens.clone());
        let x = self.embed.forward(tape, store, tokens)?;
        let pos = tape.param(store, self.position);
        let mut x = tape.add(x, pos)?;

        let mut mask = tape.constant(Tensor::ones(&[n, 1]));
        let mut partial = [0.0; 5];
        let mut delta_vars: [Option<Var>; 5] = [None; 5];
        let mut stage_masks = Vec::with_capacity(BLOCKS - 1);
        let mut stage_partials = Vec::with_capacity(BLOCKS - 1);

        for (k, block) in self.blocks.iter().enumerate() {
            let targets = if k == 0 {
                MaskTargets::NONE
            } else {
                cfg.mask_targets
            };
            x = transformer_block(tape, store, x, mask, block, targets)?;
            for branch in self.branches.iter().filter(|b| b.block == k) {
                let out = branch.forward(tape, store, x, g)?;
                for (col, &comp) in branch.components.iter().enumerate() {
                    partial[comp] = tape.value(out).data()[col];
                    delta_vars[comp] = Some(if branch.components.len() == 1 {
                        out
                    } else {
                        tape.slice_cols(out, col, 1)?
                    });
                }
            }
            if k + 1 < BLOCKS {
                let partial_delta = BoxDelta::from_array(partial);
                stage_partials.push(partial_delta);
                if cfg.cam_enabled {
                    let (var, m) = self.mask_var(tape, &delta_vars, &partial_delta, proposal)?;
                    mask = var;
                    stage_masks.push(m);
                } else {
                    stage_masks.push(ActivationMask::ones(g, g));
                }
            }
        }

        let logits_var = self.classifier.forward(tape, store, x, g)?;
        let logits_var = tape.reshape(logits_var, &[cfg.logits()])?;

        let mut group_vars = [logits_var; 3];
        for group in ComponentGroup::ALL {
            let parts: Vec<Var> = group
                .components()
                .iter()
                .map(|&c| delta_vars[c].expect("every component has a branch"))
                .collect();
            group_vars[group.index()] = if parts.len() == 1 {
                parts[0]
            } else {
                tape.concat_cols(&parts)?
            };
        }

        Ok(HeadOutput {
            delta: BoxDelta::from_array(partial),
            class_logits: tape.value(logits_var).data().to_vec(),
            stage_masks,
            stage_partials,
            group_vars,
            logits_var,
        })
    }
}

/// Largest magnitude allowed for the log-scale components when decoding predictions.
pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000/16)

/// Decoded box and class probabilities (background last).
pub fn predict(out: &HeadOutput, proposal: &HorizontalBox) -> Result<(OrientedBox, Vec<f64>)> {
    let mut d = out.delta;
    d.dw = d.dw.clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE);
    d.dh = d.dh.clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE);
    let bx = decode_delta(proposal, &d)?;
    let mut probs = vec![0.0; out.class_logits.len()];
    crate::autodiff::kernels::softmax_into(&out.class_logits, &mut probs);
    Ok((bx, probs))
}
