//! The multi-branch operator model: GRU-encoded input functions, an MLP
//! trunk over query coordinates, concatenation merge, per-component inner
//! product reduction, and optional hard boundary enforcement.
//!
//! Layout conventions used throughout:
//! - sequence tensors are flat [case][time][feature];
//! - stacked branch outputs order rows time-major: row = t * N_b + b;
//! - multi-component widths are component blocks: within a branch (or trunk)
//!   output of width D * N_c, component c owns columns [c*D, (c+1)*D).

use super::bc::BcEnforcement;
use super::gru::{GruCellVars, GruStack};
use super::mlp::Mlp;
use crate::autodiff::{Tape, Tensor, VarId};
use crate::error::{CoreError, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BranchConfig {
    /// Sensor count this branch consumes per time step.
    pub input_size: usize,
    pub gru_layers: usize,
    /// GRU hidden width N_H.
    pub hidden: usize,
    /// Group-norm channels N_ch; 0 disables normalization.
    pub norm_channels: usize,
    /// Fully connected layers after the GRU (>= 1).
    pub fc_layers: usize,
    /// Per-component output width D_out_i.
    pub out_size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrunkConfig {
    /// Coordinates per query node N_d.
    pub input_size: usize,
    pub fc_layers: usize,
    pub hidden: usize,
    /// Per-component output width; must equal the branch out_size sum.
    pub out_size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub branches: Vec<BranchConfig>,
    pub trunk: TrunkConfig,
    pub n_components: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.branches.is_empty() || self.n_components == 0 {
            return Err(CoreError::invalid("model needs branches and components"));
        }
        let d_sum: usize = self.branches.iter().map(|b| b.out_size).sum();
        if d_sum != self.trunk.out_size {
            return Err(CoreError::invalid(format!(
                "trunk out_size {} must equal branch out_size sum {}",
                self.trunk.out_size, d_sum
            )));
        }
        for (i, b) in self.branches.iter().enumerate() {
            if b.norm_channels > 0 && b.hidden % b.norm_channels != 0 {
                return Err(CoreError::invalid(format!(
                    "branch {i}: {} channels do not divide hidden {}",
                    b.norm_channels, b.hidden
                )));
            }
            if b.input_size == 0 || b.hidden == 0 || b.out_size == 0 || b.gru_layers == 0 || b.fc_layers == 0 {
                return Err(CoreError::invalid(format!("branch {i}: zero-sized field")));
            }
        }
        Ok(())
    }
}

/// Trainable affine of the group-norm layer.
#[derive(Debug, Clone)]
pub struct GroupNormAffine {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub n_ch: usize,
}

#[derive(Debug, Clone)]
pub struct Branch {
    pub config: BranchConfig,
    pub gru: GruStack,
    pub norm: Option<GroupNormAffine>,
    pub mlp: Mlp,
}

/// GRU-branch operator network with optional boundary-condition wrapper.
#[derive(Debug, Clone)]
pub struct OperatorModel {
    pub config: ModelConfig,
    pub branches: Vec<Branch>,
    pub trunk: Mlp,
    /// Per-component output bias b0, shape [1, N_c].
    pub b0: Tensor,
    pub bc: Option<BcEnforcement>,
}

pub struct BranchVars {
    pub gru: Vec<GruCellVars>,
    pub norm: Option<(VarId, VarId)>,
    pub mlp: Vec<VarId>,
}

/// Leased parameter handles in canonical order; produced per forward pass.
pub struct ModelVars {
    pub branches: Vec<BranchVars>,
    pub trunk: Vec<VarId>,
    pub b0: VarId,
}

/// Dense network output with [case][time][node][component] indexing.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub data: Vec<f64>,
    pub n_b: usize,
    pub n_t: usize,
    pub n_n: usize,
    pub n_c: usize,
}

impl ModelOutput {
    pub fn at(&self, b: usize, t: usize, n: usize, c: usize) -> f64 {
        self.data[((b * self.n_t + t) * self.n_n + n) * self.n_c + c]
    }
}

impl OperatorModel {
    pub fn init(config: ModelConfig, bc: Option<BcEnforcement>, seed: u64) -> Result<OperatorModel> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_c = config.n_components;
        let branches = config
            .branches
            .iter()
            .map(|bc_cfg| {
                let gru = GruStack::init(bc_cfg.input_size, bc_cfg.hidden, bc_cfg.gru_layers, &mut rng);
                let norm = if bc_cfg.norm_channels > 0 {
                    Some(GroupNormAffine {
                        gamma: Tensor::new(vec![1, bc_cfg.hidden], vec![1.0; bc_cfg.hidden])
                            .unwrap()
                            .param(),
                        beta: Tensor::zeros(vec![1, bc_cfg.hidden]).param(),
                        n_ch: bc_cfg.norm_channels,
                    })
                } else {
                    None
                };
                let mut sizes = vec![bc_cfg.hidden; bc_cfg.fc_layers];
                sizes.push(bc_cfg.out_size * n_c);
                let mlp = Mlp::init(&sizes, &mut rng);
                Branch {
                    config: bc_cfg.clone(),
                    gru,
                    norm,
                    mlp,
                }
            })
            .collect();
        let mut trunk_sizes = vec![config.trunk.input_size];
        for _ in 0..config.trunk.fc_layers.saturating_sub(1) {
            trunk_sizes.push(config.trunk.hidden);
        }
        trunk_sizes.push(config.trunk.out_size * n_c);
        let trunk = Mlp::init(&trunk_sizes, &mut rng);
        Ok(OperatorModel {
            branches,
            trunk,
            b0: Tensor::zeros(vec![1, n_c]).param(),
            bc,
            config,
        })
    }

    /// Named parameters in canonical (lease) order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, br) in self.branches.iter().enumerate() {
            for (j, cell) in br.gru.cells.iter().enumerate() {
                for (name, t) in cell.params() {
                    out.push((format!("branch{i}/gru{j}/{name}"), t));
                }
            }
            if let Some(norm) = &br.norm {
                out.push((format!("branch{i}/norm/gamma"), &norm.gamma));
                out.push((format!("branch{i}/norm/beta"), &norm.beta));
            }
            for (name, t) in br.mlp.params() {
                out.push((format!("branch{i}/{name}"), t));
            }
        }
        for (name, t) in self.trunk.params() {
            out.push((format!("trunk/{name}"), t));
        }
        out.push(("b0".to_string(), &self.b0));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        for (i, br) in self.branches.iter_mut().enumerate() {
            for (j, cell) in br.gru.cells.iter_mut().enumerate() {
                for (name, t) in cell.params_mut() {
                    out.push((format!("branch{i}/gru{j}/{name}"), t));
                }
            }
            if let Some(norm) = &mut br.norm {
                out.push((format!("branch{i}/norm/gamma"), &mut norm.gamma));
                out.push((format!("branch{i}/norm/beta"), &mut norm.beta));
            }
            for (name, t) in br.mlp.params_mut() {
                out.push((format!("branch{i}/{name}"), t));
            }
        }
        for (name, t) in self.trunk.params_mut() {
            out.push((format!("trunk/{name}"), t));
        }
        out.push(("b0".to_string(), &mut self.b0));
        out
    }

    pub fn n_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Lease all parameters onto a tape.
    pub fn lease(&self, tape: &mut Tape) -> ModelVars {
        let branches = self
            .branches
            .iter()
            .map(|br| {
                let gru = br
                    .gru
                    .cells
                    .iter()
                    .map(|cell| {
                        let ids: Vec<VarId> =
                            cell.params().iter().map(|(_, t)| tape.leaf(t)).collect();
                        GruCellVars::from_slice(&ids)
                    })
                    .collect();
                let norm = br
                    .norm
                    .as_ref()
                    .map(|n| (tape.leaf(&n.gamma), tape.leaf(&n.beta)));
                let mlp = br.mlp.params().iter().map(|(_, t)| tape.leaf(t)).collect();
                BranchVars { gru, norm, mlp }
            })
            .collect();
        let trunk = self.trunk.params().iter().map(|(_, t)| tape.leaf(t)).collect();
        let b0 = tape.leaf(&self.b0);
        ModelVars { branches, trunk, b0 }
    }

    /// Copy gradients from a backward pass into the parameter tensors.
    pub fn pull_grads(&mut self, tape: &Tape, vars: &ModelVars) {
        let mut grads: Vec<Vec<f64>> = Vec::new();
        for bv in &vars.branches {
            for cv in &bv.gru {
                for id in [cv.w_xr, cv.w_xz, cv.w_xh, cv.w_hr, cv.w_hz, cv.w_hh, cv.b_r, cv.b_z, cv.b_h] {
                    grads.push(tape.grad(id));
                }
            }
            if let Some((g, b)) = bv.norm {
                grads.push(tape.grad(g));
                grads.push(tape.grad(b));
            }
            for &id in &bv.mlp {
                grads.push(tape.grad(id));
            }
        }
        for &id in &vars.trunk {
            grads.push(tape.grad(id));
        }
        grads.push(tape.grad(vars.b0));

        for ((_, t), g) in self.named_params_mut().into_iter().zip(grads) {
            t.grad = Some(g);
        }
    }

    /// Per-time-step branch outputs: [N_t * N_b, D_out_i * N_c] with rows
    /// time-major (row = t * N_b + b). Hidden states start at zero and the
    /// same post-GRU MLP is shared across time steps.
    pub fn branch_forward(
        &self,
        tape: &mut Tape,
        branch_idx: usize,
        vars: &BranchVars,
        input_seq: &[f64],
        n_b: usize,
        n_t: usize,
    ) -> Result<VarId> {
        let br = &self.branches[branch_idx];
        let n_in = br.config.input_size;
        if input_seq.len() != n_b * n_t * n_in {
            return Err(CoreError::invalid(format!(
                "branch {branch_idx} input length {} != {}x{}x{}",
                input_seq.len(),
                n_b,
                n_t,
                n_in
            )));
        }
        let mut steps = Vec::with_capacity(n_t);
        for t in 0..n_t {
            let mut data = vec![0.0; n_b * n_in];
            for b in 0..n_b {
                let src = (b * n_t + t) * n_in;
                data[b * n_in..(b + 1) * n_in].copy_from_slice(&input_seq[src..src + n_in]);
            }
            steps.push(tape.constant(vec![n_b, n_in], data)?);
        }
        let hidden_seq = br.gru.unroll(tape, &vars.gru, &steps, n_b)?;
        let stacked = tape.concat_rows(&hidden_seq)?;
        let normed = match (&br.norm, vars.norm) {
            (Some(n), Some((gamma, beta))) => tape.group_norm(stacked, n.n_ch, gamma, beta)?,
            _ => stacked,
        };
        br.mlp.forward(tape, &vars.mlp, normed)
    }

    /// Trunk output over the query nodes: [N_n, D_out * N_c].
    pub fn trunk_forward(&self, tape: &mut Tape, vars: &ModelVars, coords: &[f64], n_n: usize) -> Result<VarId> {
        let n_d = self.config.trunk.input_size;
        if coords.len() != n_n * n_d {
            return Err(CoreError::invalid("trunk coordinate array size mismatch"));
        }
        let x = tape.constant(vec![n_n, n_d], coords.to_vec())?;
        self.trunk.forward(tape, &vars.trunk, x)
    }

    /// Full forward on an existing tape; returns one [N_t * N_b, N_n] block
    /// per output component.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        inputs: &[&[f64]],
        coords: &[f64],
        times: &[f64],
        n_b: usize,
        n_t: usize,
    ) -> Result<Vec<VarId>> {
        if inputs.len() != self.branches.len() {
            return Err(CoreError::invalid(format!(
                "expected {} branch inputs, got {}",
                self.branches.len(),
                inputs.len()
            )));
        }
        if times.len() != n_t {
            return Err(CoreError::invalid("time axis length must equal N_t"));
        }
        let n_d = self.config.trunk.input_size;
        let n_n = coords.len() / n_d;
        let n_c = self.config.n_components;

        let branch_outs: Vec<VarId> = (0..self.branches.len())
            .map(|i| self.branch_forward(tape, i, &vars.branches[i], inputs[i], n_b, n_t))
            .collect::<Result<_>>()?;
        let trunk_out = self.trunk_forward(tape, vars, coords, n_n)?;

        // Precompute BC masks once per node.
        let bc_masks: Option<(Vec<f64>, Vec<f64>)> = self.bc.as_ref().map(|bc| {
            let ell: Vec<f64> = (0..n_n)
                .map(|n| bc.ell_product(&coords[n * n_d..(n + 1) * n_d]))
                .collect();
            let mut offsets = vec![0.0; n_t * n_b * n_n];
            for t in 0..n_t {
                for b in 0..n_b {
                    let row = t * n_b + b;
                    for n in 0..n_n {
                        offsets[row * n_n + n] = bc.offset(&coords[n * n_d..(n + 1) * n_d], times[t]);
                    }
                }
            }
            (ell, offsets)
        });

        let mut components = Vec::with_capacity(n_c);
        for c in 0..n_c {
            let mut parts = Vec::with_capacity(self.branches.len());
            for (i, &bo) in branch_outs.iter().enumerate() {
                let d = self.branches[i].config.out_size;
                parts.push(tape.slice_cols(bo, c * d, d)?);
            }
            let concat = tape.concat_cols(&parts)?;
            let d_total = self.config.trunk.out_size;
            let trunk_c = tape.slice_cols(trunk_out, c * d_total, d_total)?;
            let merged = tape.matmul_nt(concat, trunk_c)?;
            let b0c = tape.slice_cols(vars.b0, c, 1)?;
            let with_bias = tape.add_scalar_var(merged, b0c)?;
            let out = match &bc_masks {
                Some((ell, offsets)) => {
                    let scaled = tape.scale_columns(with_bias, ell)?;
                    let off = tape.constant(vec![n_t * n_b, n_n], offsets.clone())?;
                    tape.add(scaled, off)?
                }
                None => with_bias,
            };
            components.push(out);
        }
        Ok(components)
    }

    /// Inference entry point: runs on a private tape without gradients and
    /// repacks into [case][time][node][component].
    pub fn forward(
        &self,
        inputs: &[&[f64]],
        coords: &[f64],
        times: &[f64],
        n_b: usize,
        n_t: usize,
    ) -> Result<ModelOutput> {
        let mut frozen = self.clone();
        for (_, t) in frozen.named_params_mut() {
            t.requires_grad = false;
            t.grad = None;
        }
        let mut tape = Tape::new();
        let vars = frozen.lease(&mut tape);
        let comps = frozen.forward_on_tape(&mut tape, &vars, inputs, coords, times, n_b, n_t)?;
        let n_d = self.config.trunk.input_size;
        let n_n = coords.len() / n_d;
        let n_c = self.config.n_components;
        let mut data = vec![0.0; n_b * n_t * n_n * n_c];
        for (c, &v) in comps.iter().enumerate() {
            let vals = tape.value(v);
            for t in 0..n_t {
                for b in 0..n_b {
                    for n in 0..n_n {
                        data[((b * n_t + t) * n_n + n) * n_c + c] = vals[(t * n_b + b) * n_n + n];
                    }
                }
            }
        }
        Ok(ModelOutput {
            data,
            n_b,
            n_t,
            n_n,
            n_c,
        })
    }
}

/// Array-level merge: out[b,t,n,c] = sum_k concat[b,t,(k,c)] * trunk[n,(k,c)] + b0[c].
///
/// Branch blocks are component-major (columns [c*D_i, (c+1)*D_i) per branch),
/// matching the tape path in [`OperatorModel::forward_on_tape`].
pub fn merge_and_reduce(
    branch_outs: &[&[f64]],
    d_outs: &[usize],
    trunk_out: &[f64],
    n_b: usize,
    n_t: usize,
    n_n: usize,
    n_c: usize,
    bias: &[f64],
) -> Result<Vec<f64>> {
    let d_total: usize = d_outs.iter().sum();
    if trunk_out.len() != n_n * d_total * n_c {
        return Err(CoreError::invalid(format!(
            "trunk width mismatch: {} vs {}",
            trunk_out.len(),
            n_n * d_total * n_c
        )));
    }
    if bias.len() != n_c {
        return Err(CoreError::invalid("bias length must equal component count"));
    }
    for (i, (bo, &d)) in branch_outs.iter().zip(d_outs).enumerate() {
        if bo.len() != n_b * n_t * d * n_c {
            return Err(CoreError::invalid(format!("branch {i} width mismatch")));
        }
    }
    let mut out = vec![0.0; n_b * n_t * n_n * n_c];
    for b in 0..n_b {
        for t in 0..n_t {
            for n in 0..n_n {
                for c in 0..n_c {
                    let mut acc = bias[c];
                    let mut k0 = 0;
                    for (bo, &d) in branch_outs.iter().zip(d_outs) {
                        let row = (b * n_t + t) * d * n_c;
                        for k in 0..d {
                            acc += bo[row + c * d + k] * trunk_out[n * d_total * n_c + c * d_total + k0 + k];
                        }
                        k0 += d;
                    }
                    out[((b * n_t + t) * n_n + n) * n_c + c] = acc;
                }
            }
        }
    }
    Ok(out)
}
