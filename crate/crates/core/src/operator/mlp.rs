//! Fully connected layers with tanh hidden activations and a linear final
//! layer.

use crate::autodiff::{Tape, Tensor, VarId};
use crate::error::Result;
use rand::Rng;

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

/// MLP as a layer-size list: sizes = [in, h1, ..., out], one weight layer per
/// adjacent pair.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn init(sizes: &[usize], rng: &mut impl Rng) -> Mlp {
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-limit..limit)).collect();
            layers.push(Linear {
                w: Tensor::new(vec![fan_in, fan_out], data).unwrap().param(),
                b: Tensor::zeros(vec![1, fan_out]).param(),
            });
        }
        Mlp { layers }
    }

    pub fn in_size(&self) -> usize {
        self.layers[0].w.shape[0]
    }

    pub fn out_size(&self) -> usize {
        self.layers.last().unwrap().w.shape[1]
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("fc{i}/w"), &l.w));
            out.push((format!("fc{i}/b"), &l.b));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("fc{i}/w"), &mut l.w));
            out.push((format!("fc{i}/b"), &mut l.b));
        }
        out
    }

    /// Forward on leased vars (pairs of w, b in layer order); tanh between
    /// layers, linear output.
    pub fn forward(&self, tape: &mut Tape, vars: &[VarId], x: VarId) -> Result<VarId> {
        debug_assert_eq!(vars.len(), 2 * self.layers.len());
        let mut cur = x;
        for (i, _) in self.layers.iter().enumerate() {
            let w = vars[2 * i];
            let b = vars[2 * i + 1];
            let lin = tape.matmul(cur, w)?;
            let lin = tape.add_bias(lin, b)?;
            cur = if i + 1 < self.layers.len() { tape.tanh(lin) } else { lin };
        }
        Ok(cur)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn shapes_and_linearity_of_final_layer() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let mlp = Mlp::init(&[3, 5, 2], &mut rng);
        assert_eq!(mlp.in_size(), 3);
        assert_eq!(mlp.out_size(), 2);
        let mut tape = Tape::new();
        let vars: Vec<VarId> = mlp.params().iter().map(|(_, t)| tape.leaf(t)).collect();
        let x = tape.constant(vec![4, 3], vec![0.1; 12]).unwrap();
        let y = mlp.forward(&mut tape, &vars, x).unwrap();
        assert_eq!(tape.shape(y), &[4, 2]);

        // doubling the last hidden layer's input doubles a single-layer MLP output
        let single = Mlp::init(&[2, 2], &mut rng);
        let mut tape = Tape::new();
        let vars: Vec<VarId> = single.params().iter().map(|(_, t)| tape.leaf(t)).collect();
        let x1 = tape.constant(vec![1, 2], vec![0.3, -0.2]).unwrap();
        let x2 = tape.constant(vec![1, 2], vec![0.6, -0.4]).unwrap();
        let y1 = single.forward(&mut tape, &vars, x1).unwrap();
        let y2 = single.forward(&mut tape, &vars, x2).unwrap();
        for i in 0..2 {
            let b = single.layers[0].b.data[i];
            assert!(((tape.value(y2)[i] - b) - 2.0 * (tape.value(y1)[i] - b)).abs() < 1e-12);
        }
    }
}
