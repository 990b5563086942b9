//! Multi-scale temporal convolution stack.

use rand::Rng;

use super::{NetError, Result};
use crate::tensor::{Graph, ParamInit, ParameterSet, Var};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MsTcnConfig {
    pub blocks: usize,
    pub kernel_sizes: Vec<usize>,
    /// Total channels per block, split evenly across branches.
    pub channels: usize,
}

impl MsTcnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.kernel_sizes.is_empty() {
            return Err(NetError::Config("temporal stack needs blocks and branches".into()));
        }
        if let Some(k) = self.kernel_sizes.iter().find(|&&k| k % 2 == 0) {
            return Err(NetError::Config(format!("kernel size {k} is not odd")));
        }
        if self.channels == 0 || !self.channels.is_multiple_of(self.kernel_sizes.len()) {
            return Err(NetError::Config(format!(
                "{} channels do not split across {} branches",
                self.channels,
                self.kernel_sizes.len()
            )));
        }
        Ok(())
    }

    pub fn branch_channels(&self) -> usize {
        self.channels / self.kernel_sizes.len()
    }

    pub fn param_count(&self) -> usize {
        let cb = self.branch_channels();
        let per_block: usize = self
            .kernel_sizes
            .iter()
            .map(|k| cb * self.channels * k + cb)
            .sum();
        self.blocks * per_block
    }
}

fn branch_name(prefix: &str, block: usize, branch: usize) -> String {
    format!("{prefix}.blocks.{block}.branch.{branch}")
}

pub fn declare_mstcn(params: &mut ParameterSet, prefix: &str, cfg: &MsTcnConfig, rng: &mut impl Rng) {
    let cb = cfg.branch_channels();
    for b in 0..cfg.blocks {
        for (j, &k) in cfg.kernel_sizes.iter().enumerate() {
            let name = branch_name(prefix, b, j);
            params.declare(
                format!("{name}.w"),
                &[cb, cfg.channels, k],
                ParamInit::Xavier {
                    fan_in: cfg.channels * k,
                    fan_out: cb * k,
                },
                rng,
            );
            params.declare(format!("{name}.b"), &[cb], ParamInit::Zeros, rng);
        }
    }
}

/// `seq [B, T, C]` to `[B, T, C]`.
///
/// Each block runs its branches over the block input with same-length
/// padding, concatenates them along channels, applies ReLU and adds the
/// block input back.
pub fn mstcn_forward(g: &mut Graph, params: &ParameterSet, prefix: &str, cfg: &MsTcnConfig, seq: Var) -> Result<Var> {
    cfg.validate()?;
    let shape = g.shape(seq).to_vec();
    if shape.len() != 3 || shape[2] != cfg.channels {
        return Err(NetError::Input(format!(
            "temporal stack expects [B, T, {}], got {shape:?}",
            cfg.channels
        )));
    }
    let mut x = seq;
    for b in 0..cfg.blocks {
        let xc = g.permute(x, &[0, 2, 1])?;
        let mut branches = Vec::with_capacity(cfg.kernel_sizes.len());
        for (j, &k) in cfg.kernel_sizes.iter().enumerate() {
            let name = branch_name(prefix, b, j);
            let w = g.param(params, &format!("{name}.w"))?;
            let bias = g.param(params, &format!("{name}.b"))?;
            branches.push(g.conv1d(xc, w, Some(bias), 1, k / 2)?);
        }
        let h = g.concat(&branches, 1)?;
        let h = g.relu(h)?;
        let h = g.permute(h, &[0, 2, 1])?;
        x = g.add(x, h)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(blocks: usize, channels: usize) -> MsTcnConfig {
        MsTcnConfig {
            blocks,
            kernel_sizes: vec![3, 5, 7],
            channels,
        }
    }

    fn run(p: &ParameterSet, c: &MsTcnConfig, x: &Tensor) -> Tensor {
        let mut g = Graph::frozen();
        let v = g.constant(x.clone());
        let out = mstcn_forward(&mut g, p, "t", c, v).unwrap();
        g.value(out).clone()
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn shape_is_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = cfg(2, 66);
        let mut p = ParameterSet::new();
        declare_mstcn(&mut p, "t", &c, &mut rng);
        assert_eq!(p.numel(), c.param_count());
        let x = random(&mut rng, &[1, 16, 66]);
        assert_eq!(run(&p, &c, &x).shape(), &[1, 16, 66]);
    }

    #[test]
    fn zero_weights_are_a_pure_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = cfg(2, 66);
        let mut p = ParameterSet::new();
        declare_mstcn(&mut p, "t", &c, &mut rng);
        for (_, t) in p.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = random(&mut rng, &[2, 16, 66]);
        assert_eq!(run(&p, &c, &x), x);
    }

    #[test]
    fn delta_kernels_add_rectified_input() {
        // Every branch copies its slice of input channels through the
        // centre tap, so one block maps x to x + relu(x).
        let c = MsTcnConfig {
            blocks: 1,
            kernel_sizes: vec![3, 5],
            channels: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ParameterSet::new();
        declare_mstcn(&mut p, "t", &c, &mut rng);
        for (j, k) in [3usize, 5].into_iter().enumerate() {
            let mut w = vec![0.0; 2 * k];
            w[j * k + k / 2] = 1.0;
            p.insert(format!("t.blocks.0.branch.{j}.w"), Tensor::new(vec![1, 2, k], w).unwrap());
        }
        let x = Tensor::new(vec![1, 2, 2], vec![1.5, -2.0, -0.5, 3.0]).unwrap();
        let y = run(&p, &c, &x);
        assert_eq!(y.data(), &[3.0, -2.0, -0.5, 6.0]);
    }

    #[test]
    fn invalid_configs() {
        assert!(cfg(2, 64).validate().is_err());
        let even = MsTcnConfig {
            blocks: 1,
            kernel_sizes: vec![3, 4],
            channels: 8,
        };
        assert!(even.validate().is_err());
        assert!(cfg(0, 66).validate().is_err());
    }
}
