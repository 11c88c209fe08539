//! Gated recurrent unit cells and stacks.
//!
//! Row-vector convention: a batch of inputs is [N_b, d], hidden states are
//! [N_b, h], and gates compute x W_x + h W_h + b.

use crate::autodiff::{Tape, Tensor, VarId};
use crate::error::Result;
use rand::Rng;

/// One GRU cell: reset gate, update gate, candidate state.
#[derive(Debug, Clone)]
pub struct GruCell {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_xr: Tensor,
    pub w_xz: Tensor,
    pub w_xh: Tensor,
    pub w_hr: Tensor,
    pub w_hz: Tensor,
    pub w_hh: Tensor,
    pub b_r: Tensor,
    pub b_z: Tensor,
    pub b_h: Tensor,
}

fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::new(vec![rows, cols], data).unwrap().param()
}

impl GruCell {
    pub fn init(input_dim: usize, hidden_dim: usize, rng: &mut impl Rng) -> GruCell {
        GruCell {
            input_dim,
            hidden_dim,
            w_xr: glorot(input_dim, hidden_dim, rng),
            w_xz: glorot(input_dim, hidden_dim, rng),
            w_xh: glorot(input_dim, hidden_dim, rng),
            w_hr: glorot(hidden_dim, hidden_dim, rng),
            w_hz: glorot(hidden_dim, hidden_dim, rng),
            w_hh: glorot(hidden_dim, hidden_dim, rng),
            b_r: Tensor::zeros(vec![1, hidden_dim]).param(),
            b_z: Tensor::zeros(vec![1, hidden_dim]).param(),
            b_h: Tensor::zeros(vec![1, hidden_dim]).param(),
        }
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("w_xr", &self.w_xr),
            ("w_xz", &self.w_xz),
            ("w_xh", &self.w_xh),
            ("w_hr", &self.w_hr),
            ("w_hz", &self.w_hz),
            ("w_hh", &self.w_hh),
            ("b_r", &self.b_r),
            ("b_z", &self.b_z),
            ("b_h", &self.b_h),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("w_xr", &mut self.w_xr),
            ("w_xz", &mut self.w_xz),
            ("w_xh", &mut self.w_xh),
            ("w_hr", &mut self.w_hr),
            ("w_hz", &mut self.w_hz),
            ("w_hh", &mut self.w_hh),
            ("b_r", &mut self.b_r),
            ("b_z", &mut self.b_z),
            ("b_h", &mut self.b_h),
        ]
    }
}

/// Leased tape handles for one cell's parameters, in `params()` order.
#[derive(Debug, Clone, Copy)]
pub struct GruCellVars {
    pub w_xr: VarId,
    pub w_xz: VarId,
    pub w_xh: VarId,
    pub w_hr: VarId,
    pub w_hz: VarId,
    pub w_hh: VarId,
    pub b_r: VarId,
    pub b_z: VarId,
    pub b_h: VarId,
}

impl GruCellVars {
    pub fn from_slice(vars: &[VarId]) -> GruCellVars {
        GruCellVars {
            w_xr: vars[0],
            w_xz: vars[1],
            w_xh: vars[2],
            w_hr: vars[3],
            w_hz: vars[4],
            w_hh: vars[5],
            b_r: vars[6],
            b_z: vars[7],
            b_h: vars[8],
        }
    }
}

/// One gate update: exact reset/update/candidate equations, differentiable.
pub fn gru_cell_step(tape: &mut Tape, vars: &GruCellVars, x: VarId, h_prev: VarId) -> Result<VarId> {
    let xr = tape.matmul(x, vars.w_xr)?;
    let hr = tape.matmul(h_prev, vars.w_hr)?;
    let r_pre = tape.add(xr, hr)?;
    let r_pre = tape.add_bias(r_pre, vars.b_r)?;
    let r = tape.sigmoid(r_pre);

    let xz = tape.matmul(x, vars.w_xz)?;
    let hz = tape.matmul(h_prev, vars.w_hz)?;
    let z_pre = tape.add(xz, hz)?;
    let z_pre = tape.add_bias(z_pre, vars.b_z)?;
    let z = tape.sigmoid(z_pre);

    let rh = tape.mul(r, h_prev)?;
    let rhw = tape.matmul(rh, vars.w_hh)?;
    let xh = tape.matmul(x, vars.w_xh)?;
    let cand_pre = tape.add(rhw, xh)?;
    let cand_pre = tape.add_bias(cand_pre, vars.b_h)?;
    let cand = tape.tanh(cand_pre);

    // h = z . h_prev + (1 - z) . cand
    let zh = tape.mul(z, h_prev)?;
    let neg_z = tape.scale(z, -1.0);
    let one_minus_z = tape.add_scalar(neg_z, 1.0);
    let zc = tape.mul(one_minus_z, cand)?;
    tape.add(zh, zc)
}

/// Stacked GRUs; layer k consumes layer k-1's hidden sequence.
#[derive(Debug, Clone)]
pub struct GruStack {
    pub cells: Vec<GruCell>,
}

impl GruStack {
    pub fn init(input_dim: usize, hidden_dim: usize, layers: usize, rng: &mut impl Rng) -> GruStack {
        let mut cells = Vec::with_capacity(layers);
        for k in 0..layers {
            let d = if k == 0 { input_dim } else { hidden_dim };
            cells.push(GruCell::init(d, hidden_dim, rng));
        }
        GruStack { cells }
    }

    /// Unroll over a sequence of [N_b, d] inputs; hidden states start at zero.
    /// Returns the top layer's hidden state at every time step.
    pub fn unroll(
        &self,
        tape: &mut Tape,
        vars: &[GruCellVars],
        inputs: &[VarId],
        batch: usize,
    ) -> Result<Vec<VarId>> {
        let h = self.cells[0].hidden_dim;
        let zero = tape.constant(vec![batch, h], vec![0.0; batch * h])?;
        let mut hidden: Vec<VarId> = vec![zero; self.cells.len()];
        let mut out = Vec::with_capacity(inputs.len());
        for &x_t in inputs {
            let mut layer_in = x_t;
            for (k, cell_vars) in vars.iter().enumerate() {
                let h_next = gru_cell_step(tape, cell_vars, layer_in, hidden[k])?;
                hidden[k] = h_next;
                layer_in = h_next;
            }
            out.push(layer_in);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_cell(d: usize, h: usize) -> GruCell {
        GruCell {
            input_dim: d,
            hidden_dim: h,
            w_xr: Tensor::zeros(vec![d, h]).param(),
            w_xz: Tensor::zeros(vec![d, h]).param(),
            w_xh: Tensor::zeros(vec![d, h]).param(),
            w_hr: Tensor::zeros(vec![h, h]).param(),
            w_hz: Tensor::zeros(vec![h, h]).param(),
            w_hh: Tensor::zeros(vec![h, h]).param(),
            b_r: Tensor::zeros(vec![1, h]).param(),
            b_z: Tensor::zeros(vec![1, h]).param(),
            b_h: Tensor::zeros(vec![1, h]).param(),
        }
    }

    fn lease(tape: &mut Tape, cell: &GruCell) -> GruCellVars {
        let ids: Vec<VarId> = cell.params().iter().map(|(_, t)| tape.leaf(t)).collect();
        GruCellVars::from_slice(&ids)
    }

    #[test]
    fn zero_weights_zero_state() {
        let cell = zero_cell(2, 3);
        let mut tape = Tape::new();
        let vars = lease(&mut tape, &cell);
        let x = tape.constant(vec![1, 2], vec![0.7, -0.3]).unwrap();
        let h0 = tape.constant(vec![1, 3], vec![0.0; 3]).unwrap();
        let h1 = gru_cell_step(&mut tape, &vars, x, h0).unwrap();
        assert!(tape.value(h1).iter().all(|&v| v == 0.0));
    }

    /// Hand evaluation of the four gate formulas for the scalar all-ones cell.
    #[test]
    fn scalar_all_ones_hand_oracle() {
        let mut cell = zero_cell(1, 1);
        for (_, t) in cell.params_mut() {
            if t.shape == vec![1, 1] {
                t.data[0] = 1.0;
            }
        }
        // biases stay zero
        cell.b_r.data[0] = 0.0;
        cell.b_z.data[0] = 0.0;
        cell.b_h.data[0] = 0.0;
        let mut tape = Tape::new();
        let vars = lease(&mut tape, &cell);
        let x = tape.constant(vec![1, 1], vec![1.0]).unwrap();
        let h0 = tape.constant(vec![1, 1], vec![0.0]).unwrap();
        let h1 = gru_cell_step(&mut tape, &vars, x, h0).unwrap();

        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        // r = sig(1), z = sig(1), cand = tanh(1), h = (1 - z) * cand
        let expect = (1.0 - sig(1.0)) * 1.0f64.tanh();
        assert!((tape.value(h1)[0] - expect).abs() < 1e-12);
        assert!((expect - 0.2048).abs() < 1e-3);
    }

    #[test]
    fn gate_outputs_bounded() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let cell = GruCell::init(4, 5, &mut rng);
        let mut tape = Tape::new();
        let vars = lease(&mut tape, &cell);
        let mut h = tape.constant(vec![2, 5], vec![0.0; 10]).unwrap();
        for step in 0..10 {
            let xv: Vec<f64> = (0..8).map(|i| ((step * 8 + i) as f64 * 0.37).sin() * 2.0).collect();
            let x = tape.constant(vec![2, 4], xv).unwrap();
            let prev: Vec<f64> = tape.value(h).to_vec();
            h = gru_cell_step(&mut tape, &vars, x, h).unwrap();
            for (i, &v) in tape.value(h).iter().enumerate() {
                // |h_t| <= max(|h_prev|, 1) elementwise (convex gate mix)
                assert!(v.abs() <= prev[i].abs().max(1.0) + 1e-12);
            }
        }
    }

    /// d ||h_t||^2 / d(every weight block) against central finite differences.
    #[test]
    fn cell_gradients_match_finite_differences() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let cell = GruCell::init(3, 2, &mut rng);
        let xv: Vec<f64> = (0..3).map(|i| 0.4 * (i as f64 + 1.0)).collect();
        let hv: Vec<f64> = vec![0.3, -0.2];

        let eval = |c: &GruCell| -> f64 {
            let mut tape = Tape::new();
            let vars = lease(&mut tape, c);
            let x = tape.constant(vec![1, 3], xv.clone()).unwrap();
            let h0 = tape.constant(vec![1, 2], hv.clone()).unwrap();
            let h1 = gru_cell_step(&mut tape, &vars, x, h0).unwrap();
            let sq = tape.mul(h1, h1).unwrap();
            let s = tape.sum(sq);
            tape.value(s)[0]
        };

        // analytic
        let mut tape = Tape::new();
        let vars = lease(&mut tape, &cell);
        let x = tape.constant(vec![1, 3], xv.clone()).unwrap();
        let h0 = tape.constant(vec![1, 2], hv.clone()).unwrap();
        let h1 = gru_cell_step(&mut tape, &vars, x, h0).unwrap();
        let sq = tape.mul(h1, h1).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        let var_list = [
            vars.w_xr, vars.w_xz, vars.w_xh, vars.w_hr, vars.w_hz, vars.w_hh, vars.b_r, vars.b_z,
            vars.b_h,
        ];

        let h = 1e-6;
        for (pi, (name, _)) in cell.params().iter().enumerate() {
            let analytic = tape.grad(var_list[pi]);
            let n = analytic.len();
            for i in 0..n {
                let mut cp = cell.clone();
                cp.params_mut()[pi].1.data[i] += h;
                let fp = eval(&cp);
                let mut cm = cell.clone();
                cm.params_mut()[pi].1.data[i] -= h;
                let fm = eval(&cm);
                let fd = (fp - fm) / (2.0 * h);
                assert!(
                    (fd - analytic[i]).abs() < 1e-5 * fd.abs().max(analytic[i].abs()) + 1e-9,
                    "{name}[{i}]: fd {fd} vs {}",
                    analytic[i]
                );
            }
        }
    }

    /// Constant input drives the hidden state toward a fixed point.
    #[test]
    fn constant_input_contracts() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let stack = GruStack::init(3, 4, 2, &mut rng);
        let mut tape = Tape::new();
        let vars: Vec<GruCellVars> = stack.cells.iter().map(|c| lease(&mut tape, c)).collect();
        let xv = vec![0.5, -0.4, 0.9];
        let inputs: Vec<VarId> = (0..12)
            .map(|_| tape.constant(vec![1, 3], xv.clone()).unwrap())
            .collect();
        let outs = stack.unroll(&mut tape, &vars, &inputs, 1).unwrap();
        let diffs: Vec<f64> = outs
            .windows(2)
            .map(|w| {
                tape.value(w[0])
                    .iter()
                    .zip(tape.value(w[1]))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        assert!(diffs.last().unwrap() < &(0.5 * diffs[0]));
        for w in diffs.windows(2) {
            assert!(w[1] <= w[0] * 1.10, "diff sequence rose: {diffs:?}");
        }
    }
}
