//! Small fully connected network with rectifier hidden layers, a scalar
//! linear output and hand-written reverse mode.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::PolicyError;

/// Parameters are stored flat, layer by layer: weights (row-major
/// `out × in`) followed by biases.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Activations retained by [`Mlp::forward`].
#[derive(Debug, Clone)]
pub struct MlpTape {
    sizes: Vec<usize>,
    /// Input of every layer (post-activation of the previous one).
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of every layer.
    pre: Vec<Vec<f64>>,
}

impl MlpTape {
    /// Raw (pre-squash) network output.
    pub fn output(&self) -> f64 {
        self.pre.last().map(|v| v[0]).unwrap_or(0.0)
    }
}

impl Mlp {
    pub fn zeros(sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2 && *sizes.last().unwrap() == 1, "scalar-output network expected");
        let n = Self::count(sizes);
        Self { sizes: sizes.to_vec(), params: vec![0.0; n] }
    }

    /// Uniform `±1/√fan_in` initialization.
    pub fn random(sizes: &[usize], seed: u64) -> Self {
        let mut m = Self::zeros(sizes);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut off = 0;
        for l in 0..sizes.len() - 1 {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in &mut m.params[off..off + fan_in * fan_out + fan_out] {
                *v = rng.random_range(-bound..bound);
            }
            off += fan_in * fan_out + fan_out;
        }
        m
    }

    fn count(sizes: &[usize]) -> usize {
        sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Named parameter blocks (`layer{l}.w`, `layer{l}.b`) for checkpoints.
    pub fn named_blocks(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        let mut off = 0;
        for l in 0..self.sizes.len() - 1 {
            let nw = self.sizes[l] * self.sizes[l + 1];
            out.push((format!("layer{l}.w"), self.params[off..off + nw].to_vec()));
            off += nw;
            out.push((format!("layer{l}.b"), self.params[off..off + self.sizes[l + 1]].to_vec()));
            off += self.sizes[l + 1];
        }
        out
    }

    /// Rebuilds from [`Mlp::named_blocks`] output.
    pub fn from_blocks(sizes: &[usize], blocks: &[(String, Vec<f64>)]) -> Result<Self, PolicyError> {
        let mut m = Self::zeros(sizes);
        let mut off = 0;
        for l in 0..sizes.len() - 1 {
            for (suffix, len) in [("w", sizes[l] * sizes[l + 1]), ("b", sizes[l + 1])] {
                let name = format!("layer{l}.{suffix}");
                let block = blocks
                    .iter()
                    .find(|(n, _)| *n == name)
                    .ok_or_else(|| PolicyError::Checkpoint(format!("missing array {name}")))?;
                if block.1.len() != len {
                    return Err(PolicyError::Checkpoint(format!("array {name} has {} values, expected {len}", block.1.len())));
                }
                m.params[off..off + len].copy_from_slice(&block.1);
                off += len;
            }
        }
        Ok(m)
    }

    pub fn forward(&self, input: &[f64]) -> (f64, MlpTape) {
        assert_eq!(input.len(), self.sizes[0], "network input size");
        let layers = self.sizes.len() - 1;
        let mut tape = MlpTape { sizes: self.sizes.clone(), inputs: Vec::with_capacity(layers), pre: Vec::with_capacity(layers) };
        let mut x = input.to_vec();
        let mut off = 0;
        for l in 0..layers {
            let (ni, no) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[off..off + ni * no];
            let b = &self.params[off + ni * no..off + ni * no + no];
            off += ni * no + no;
            let z: Vec<f64> = (0..no).map(|o| b[o] + w[o * ni..(o + 1) * ni].iter().zip(&x).map(|(a, v)| a * v).sum::<f64>()).collect();
            let next = if l + 1 < layers { z.iter().map(|v| v.max(0.0)).collect() } else { z.clone() };
            tape.inputs.push(std::mem::replace(&mut x, next));
            tape.pre.push(z);
        }
        (x[0], tape)
    }

    /// Reverse pass for a cotangent on the scalar output. Returns the
    /// parameter gradient and the input gradient.
    pub fn backward(&self, tape: &MlpTape, cotangent: f64) -> Result<(Vec<f64>, Vec<f64>), PolicyError> {
        if tape.sizes != self.sizes || tape.pre.len() != self.sizes.len() - 1 {
            return Err(PolicyError::StaleTape);
        }
        let layers = self.sizes.len() - 1;
        let mut grad = vec![0.0; self.params.len()];
        let mut offsets = Vec::with_capacity(layers);
        let mut off = 0;
        for l in 0..layers {
            offsets.push(off);
            off += self.sizes[l] * self.sizes[l + 1] + self.sizes[l + 1];
        }
        let mut dz = vec![cotangent];
        for l in (0..layers).rev() {
            let (ni, no) = (self.sizes[l], self.sizes[l + 1]);
            let off = offsets[l];
            let x = &tape.inputs[l];
            for o in 0..no {
                if dz[o] == 0.0 {
                    continue;
                }
                for i in 0..ni {
                    grad[off + o * ni + i] += dz[o] * x[i];
                }
                grad[off + ni * no + o] += dz[o];
            }
            let w = &self.params[off..off + ni * no];
            let mut dx = vec![0.0; ni];
            for o in 0..no {
                if dz[o] != 0.0 {
                    for i in 0..ni {
                        dx[i] += w[o * ni + i] * dz[o];
                    }
                }
            }
            if l > 0 {
                for (d, z) in dx.iter_mut().zip(&tape.pre[l - 1]) {
                    if *z <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            dz = dx;
        }
        Ok((grad, dz))
    }
}
