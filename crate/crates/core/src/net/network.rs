use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::spec::{DeconvSpec, NetworkSpec};
use crate::error::{Error, Result};
use crate::imaging::{ColorMap, Image, ScalarMap};
use crate::io::TensorArchive;
use crate::nn::{
    Activation, ActivationKind, BatchNorm2d, Conv2d, ConvTranspose2d, Layer, Mode, Param, Real, Tensor4,
};

#[derive(Debug, Clone)]
struct TrunkLayer<T> {
    conv: Conv2d<T>,
    act: Activation<T>,
}

#[derive(Debug, Clone)]
struct Stage<T> {
    deconv: ConvTranspose2d<T>,
    bn: BatchNorm2d<T>,
    act: Activation<T>,
    skip: Option<usize>,
}

/// The two-way forked fully convolutional network: a shared convolutional
/// trunk feeding a transmittance branch and an illumination branch.
#[derive(Debug, Clone)]
pub struct DehazeNet<T> {
    spec: NetworkSpec,
    trunk: Vec<TrunkLayer<T>>,
    t_branch: Vec<Stage<T>>,
    a_branch: Vec<Stage<T>>,
}

/// Network outputs for a batch: `t` is N×1×ω×ω, `a` is N×3×ω×ω.
#[derive(Debug, Clone, PartialEq)]
pub struct ForkOutput<T> {
    pub t: Tensor4<T>,
    pub a: Tensor4<T>,
}

fn build_branch<T: Real>(specs: &[DeconvSpec], in_channels: usize, rng: &mut ChaCha8Rng) -> Vec<Stage<T>> {
    let last = specs.len() - 1;
    let mut channels = in_channels;
    specs
        .iter()
        .enumerate()
        .map(|(j, d)| {
            let stage = Stage {
                deconv: ConvTranspose2d::new(channels, d.out_channels, d.kernel, d.stride, d.padding, rng),
                bn: BatchNorm2d::new(d.out_channels),
                act: Activation::new(if j == last {
                    ActivationKind::Sigmoid
                } else {
                    ActivationKind::Tanh
                }),
                skip: d.skip,
            };
            channels = d.out_channels;
            stage
        })
        .collect()
}

impl<T: Real> DehazeNet<T> {
    /// Initialises every layer from `seed`; the same seed gives the same weights.
    pub fn new(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut channels = spec.input_channels;
        let trunk = spec
            .trunk
            .iter()
            .map(|c| {
                let layer = TrunkLayer {
                    conv: Conv2d::new(channels, c.out_channels, c.kernel, c.stride, c.padding, &mut rng),
                    act: Activation::new(ActivationKind::Tanh),
                };
                channels = c.out_channels;
                layer
            })
            .collect();
        let t_branch = build_branch(&spec.t_branch, channels, &mut rng);
        let a_branch = build_branch(&spec.a_branch, channels, &mut rng);
        Ok(DehazeNet {
            spec: spec.clone(),
            trunk,
            t_branch,
            a_branch,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn patch_size(&self) -> usize {
        self.spec.patch_size
    }

    fn check_input(&self, input: &Tensor4<T>) -> Result<()> {
        let w = self.spec.patch_size;
        if input.channels() != self.spec.input_channels || input.height() != w || input.width() != w {
            return Err(Error::invalid(format!(
                "network takes N×{}×{w}×{w} input, got {:?}",
                self.spec.input_channels,
                input.dims()
            )));
        }
        Ok(())
    }

    /// Forward pass; in [`Mode::Train`] the pass is recorded for [`Self::backward`].
    pub fn forward(&mut self, input: &Tensor4<T>, mode: Mode) -> Result<ForkOutput<T>> {
        self.check_input(input)?;
        let mut acts: Vec<Tensor4<T>> = Vec::with_capacity(self.trunk.len());
        let mut x = input.clone();
        for layer in &mut self.trunk {
            let z = layer.conv.forward(&x, mode)?;
            x = layer.act.forward(&z, mode)?;
            acts.push(x.clone());
        }
        let run = |branch: &mut Vec<Stage<T>>| -> Result<Tensor4<T>> {
            let mut y = x.clone();
            for stage in branch.iter_mut() {
                let z = stage.deconv.forward(&y, mode)?;
                let mut z = stage.bn.forward(&z, mode)?;
                if let Some(s) = stage.skip {
                    z.add_assign(&acts[s])?;
                }
                y = stage.act.forward(&z, mode)?;
            }
            Ok(y)
        };
        let t = run(&mut self.t_branch)?;
        let a = run(&mut self.a_branch)?;
        Ok(ForkOutput { t, a })
    }

    /// Inference forward pass over frozen weights (batch-norm running statistics).
    pub fn infer(&self, input: &Tensor4<T>) -> Result<ForkOutput<T>> {
        self.check_input(input)?;
        let mut acts: Vec<Tensor4<T>> = Vec::with_capacity(self.trunk.len());
        let mut x = input.clone();
        for layer in &self.trunk {
            x = layer.act.infer(&layer.conv.infer(&x)?)?;
            acts.push(x.clone());
        }
        let run = |branch: &[Stage<T>]| -> Result<Tensor4<T>> {
            let mut y = x.clone();
            for stage in branch {
                let mut z = stage.bn.infer(&stage.deconv.infer(&y)?)?;
                if let Some(s) = stage.skip {
                    z.add_assign(&acts[s])?;
                }
                y = stage.act.infer(&z)?;
            }
            Ok(y)
        };
        Ok(ForkOutput {
            t: run(&self.t_branch)?,
            a: run(&self.a_branch)?,
        })
    }

    /// Back-propagates output gradients through the recorded pass, accumulating
    /// parameter gradients. Returns the gradient with respect to the input.
    pub fn backward(&mut self, grad_t: &Tensor4<T>, grad_a: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut trunk_grads: Vec<Option<Tensor4<T>>> = vec![None; self.trunk.len()];
        let add_into = |slot: &mut Option<Tensor4<T>>, g: Tensor4<T>| -> Result<()> {
            match slot {
                Some(acc) => acc.add_assign(&g),
                None => {
                    *slot = Some(g);
                    Ok(())
                }
            }
        };
        let last = self.trunk.len() - 1;
        for (branch, grad) in [(&mut self.t_branch, grad_t), (&mut self.a_branch, grad_a)] {
            let mut g = grad.clone();
            for stage in branch.iter_mut().rev() {
                g = stage.act.backward(&g)?;
                if let Some(s) = stage.skip {
                    add_into(&mut trunk_grads[s], g.clone())?;
                }
                g = stage.bn.backward(&g)?;
                g = stage.deconv.backward(&g)?;
            }
            add_into(&mut trunk_grads[last], g)?;
        }
        let mut carry: Option<Tensor4<T>> = None;
        for (i, layer) in self.trunk.iter_mut().enumerate().rev() {
            let mut g = trunk_grads[i]
                .take()
                .ok_or_else(|| Error::State("trunk activation received no gradient".into()))?;
            if let Some(c) = carry.take() {
                g.add_assign(&c)?;
            }
            g = layer.act.backward(&g)?;
            carry = Some(layer.conv.backward(&g)?);
        }
        Ok(carry.expect("trunk is nonempty"))
    }

    /// Every trainable parameter with a stable dotted name.
    pub fn params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.trunk.iter().enumerate() {
            for (n, p) in l.conv.params() {
                out.push((format!("trunk.{i}.{n}"), p));
            }
        }
        for (prefix, branch) in [("t", &self.t_branch), ("a", &self.a_branch)] {
            for (j, s) in branch.iter().enumerate() {
                for (n, p) in s.deconv.params() {
                    out.push((format!("{prefix}.{j}.deconv.{n}"), p));
                }
                for (n, p) in s.bn.params() {
                    out.push((format!("{prefix}.{j}.bn.{n}"), p));
                }
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.trunk.iter_mut().enumerate() {
            for (n, p) in l.conv.params_mut() {
                out.push((format!("trunk.{i}.{n}"), p));
            }
        }
        for (prefix, branch) in [("t", &mut self.t_branch), ("a", &mut self.a_branch)] {
            for (j, s) in branch.iter_mut().enumerate() {
                for (n, p) in s.deconv.params_mut() {
                    out.push((format!("{prefix}.{j}.deconv.{n}"), p));
                }
                for (n, p) in s.bn.params_mut() {
                    out.push((format!("{prefix}.{j}.bn.{n}"), p));
                }
            }
        }
        out
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }

    /// Batch-norm running statistics keyed like the parameters.
    fn running_stats_mut(&mut self) -> Vec<(String, &mut Vec<T>)> {
        let mut out = Vec::new();
        for (prefix, branch) in [("t", &mut self.t_branch), ("a", &mut self.a_branch)] {
            for (j, s) in branch.iter_mut().enumerate() {
                out.push((format!("{prefix}.{j}.bn.running_mean"), &mut s.bn.state.running_mean));
                out.push((format!("{prefix}.{j}.bn.running_var"), &mut s.bn.state.running_var));
            }
        }
        out
    }

    /// Learned parameters and running statistics as a weight archive.
    pub fn to_archive(&mut self) -> TensorArchive {
        let to_f32 = |v: &[T]| v.iter().map(|x| x.to_f32().unwrap_or(f32::NAN)).collect::<Vec<f32>>();
        let mut archive = TensorArchive::new();
        for (name, p) in self.params() {
            archive.push(name, &p.shape, to_f32(&p.value)).expect("unique parameter names");
        }
        for (name, stats) in self.running_stats_mut() {
            let len = stats.len();
            archive.push(name, &[len], to_f32(stats)).expect("unique statistic names");
        }
        archive
    }

    /// Overwrites weights and running statistics from an archive of the same topology.
    pub fn load_archive(&mut self, archive: &TensorArchive) -> Result<()> {
        let expected = self.params().len() + self.running_stats_mut().len();
        if archive.entries().len() != expected {
            return Err(Error::invalid(format!(
                "weight file has {} entries, network expects {expected}",
                archive.entries().len()
            )));
        }
        for (name, p) in self.params_mut() {
            let data = archive.expect(&name, &p.shape)?;
            p.value = data.iter().map(|&v| T::lit(v as f64)).collect();
            p.zero_grad();
            p.accum.iter_mut().for_each(|a| *a = T::zero());
        }
        for (name, stats) in self.running_stats_mut() {
            let data = archive.expect(&name, &[stats.len()])?;
            *stats = data.iter().map(|&v| T::lit(v as f64)).collect();
        }
        Ok(())
    }

    /// Same topology and values in another element type.
    pub fn cast<U: Real>(&self) -> DehazeNet<U> {
        let conv_params = |p: &crate::nn::LayerParams<T>| crate::nn::LayerParams {
            weights: p.weights.cast(),
            bias: p.bias.cast(),
        };
        let stage = |s: &Stage<T>| Stage {
            deconv: ConvTranspose2d::from_params(conv_params(&s.deconv.params), s.deconv.stride, s.deconv.padding),
            bn: BatchNorm2d::from_state(crate::nn::BatchNormState {
                scale: s.bn.state.scale.cast(),
                shift: s.bn.state.shift.cast(),
                running_mean: s.bn.state.running_mean.iter().map(|v| U::lit(v.to_f64().unwrap())).collect(),
                running_var: s.bn.state.running_var.iter().map(|v| U::lit(v.to_f64().unwrap())).collect(),
                momentum: U::lit(s.bn.state.momentum.to_f64().unwrap()),
                epsilon: U::lit(s.bn.state.epsilon.to_f64().unwrap()),
            }),
            act: Activation::new(s.act.kind),
            skip: s.skip,
        };
        DehazeNet {
            spec: self.spec.clone(),
            trunk: self
                .trunk
                .iter()
                .map(|l| TrunkLayer {
                    conv: Conv2d::from_params(conv_params(&l.conv.params), l.conv.stride, l.conv.padding),
                    act: Activation::new(l.act.kind),
                })
                .collect(),
            t_branch: self.t_branch.iter().map(stage).collect(),
            a_branch: self.a_branch.iter().map(stage).collect(),
        }
    }
}

/// Channel-interleaved image → planar `3×H×W` values.
pub fn image_to_planar(img: &Image) -> Vec<f32> {
    (0..3).flat_map(|c| img.channel(c)).collect()
}

/// Planar `C×H×W` values → channel-interleaved.
pub fn planar_to_interleaved(planar: &[f32], channels: usize) -> Vec<f32> {
    let plane = planar.len() / channels;
    (0..plane)
        .flat_map(|i| (0..channels).map(move |c| planar[c * plane + i]))
        .collect()
}

/// Stacks equally sized images into an N×3×H×W tensor.
pub fn images_to_tensor(images: &[Image]) -> Result<Tensor4<f32>> {
    let Some(first) = images.first() else {
        return Err(Error::invalid("empty image batch"));
    };
    let (h, w) = first.dims();
    if images.iter().any(|i| i.dims() != (h, w)) {
        return Err(Error::invalid("images in a batch must share dimensions"));
    }
    let data = images.iter().flat_map(image_to_planar).collect();
    Tensor4::from_vec([images.len(), 3, h, w], data)
}

impl DehazeNet<f32> {
    /// Estimates `(t, A)` maps for ω×ω patches with frozen weights.
    pub fn predict(&self, patches: &[Image]) -> Result<Vec<(ScalarMap, ColorMap)>> {
        const CHUNK: usize = 16;
        let w = self.spec.patch_size;
        let mut out = Vec::with_capacity(patches.len());
        for chunk in patches.chunks(CHUNK) {
            let input = images_to_tensor(chunk)?;
            let ForkOutput { t, a } = self.infer(&input)?;
            for n in 0..chunk.len() {
                let tmap = ScalarMap::from_clamped(w, w, t.item(n).to_vec())?;
                let amap = ColorMap::from_clamped(w, w, planar_to_interleaved(a.item(n), 3))?;
                out.push((tmap, amap));
            }
        }
        Ok(out)
    }
}
