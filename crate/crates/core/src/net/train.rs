use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::{patch_loss, LossTerms, Objective, PatchTargets, TrainSample};
use super::network::DehazeNet;
use super::spec::NetworkSpec;
use crate::error::{Error, Result};
use crate::nn::{Adagrad, Mode, Tensor4};

/// Optimiser and schedule settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Reshuffle the samples every epoch.
    pub shuffle: bool,
    pub objective: Objective,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            epochs: 150,
            batch_size: 32,
            seed: 0,
            shuffle: true,
            objective: Objective::default(),
        }
    }
}

/// Mean per-sample loss terms of one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub terms: LossTerms,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.terms.total).collect()
    }

    /// CSV loss log: `epoch,loss,l1,l2,l3`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,l1,l2,l3\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{:.9},{:.9},{:.9},{:.9}\n",
                e.epoch, e.terms.total, e.terms.l1, e.terms.l2, e.terms.l3
            ));
        }
        out
    }
}

struct PlanarSample {
    hazy: Vec<f32>,
    clean: Vec<f32>,
    t: Vec<f32>,
    a: Vec<f32>,
}

fn stack(rows: impl Iterator<Item = Vec<f32>>, dims: [usize; 4]) -> Result<Tensor4<f32>> {
    Tensor4::from_vec(dims, rows.flatten().collect())
}

/// Builds a network from `spec` (seeded with `config.seed`) and trains it.
pub fn train(
    samples: &[TrainSample],
    spec: &NetworkSpec,
    config: &TrainConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<(DehazeNet<f32>, TrainReport)> {
    let mut net = DehazeNet::new(spec, config.seed)?;
    let report = train_network(&mut net, samples, config, on_epoch)?;
    Ok((net, report))
}

/// Minibatch Adagrad on an existing network. Deterministic for a fixed seed.
pub fn train_network(
    net: &mut DehazeNet<f32>,
    samples: &[TrainSample],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainReport> {
    if samples.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if config.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    if !(config.learning_rate >= 0.0 && config.learning_rate.is_finite()) {
        return Err(Error::invalid("learning rate must be a finite nonnegative number"));
    }
    config.objective.validate()?;
    let w = net.patch_size();
    if let Some(bad) = samples.iter().find(|s| s.side() != w) {
        return Err(Error::invalid(format!(
            "network takes {w}px patches, sample is {}px",
            bad.side()
        )));
    }

    let planar: Vec<PlanarSample> = samples
        .iter()
        .map(|s| {
            let [hazy, clean, t, a] = s.planar();
            PlanarSample { hazy, clean, t, a }
        })
        .collect();
    let optimizer = Adagrad::new(config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_ba7c4);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut report = TrainReport::default();
    let plane = w * w;

    for epoch in 1..=config.epochs {
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        let mut sum = LossTerms::default();
        for batch in order.chunks(config.batch_size) {
            let n = batch.len();
            let input = stack(batch.iter().map(|&i| planar[i].hazy.clone()), [n, 3, w, w])?;
            let out = net.forward(&input, Mode::Train)?;
            if !out.t.all_finite() || !out.a.all_finite() {
                return Err(Error::Numerical(format!("non-finite network output in epoch {epoch}")));
            }
            let mut grad_t = Tensor4::<f32>::zeros(out.t.dims());
            let mut grad_a = Tensor4::<f32>::zeros(out.a.dims());
            let scale = 1.0 / n as f32;
            for (k, &i) in batch.iter().enumerate() {
                let s = &planar[i];
                let terms = patch_loss(
                    PatchTargets {
                        hazy: &s.hazy,
                        clean: &s.clean,
                        t_true: &s.t,
                        a_true: &s.a,
                    },
                    out.t.item(k),
                    out.a.item(k),
                    &config.objective,
                    scale,
                    &mut grad_t.as_mut_slice()[k * plane..(k + 1) * plane],
                    &mut grad_a.as_mut_slice()[k * 3 * plane..(k + 1) * 3 * plane],
                );
                sum.total += terms.total;
                sum.l1 += terms.l1;
                sum.l2 += terms.l2;
                sum.l3 += terms.l3;
            }
            net.zero_grad();
            net.backward(&grad_t, &grad_a)?;
            for (name, p) in net.params_mut() {
                if p.grad.iter().any(|g| !g.is_finite()) {
                    return Err(Error::Numerical(format!("non-finite gradient for {name}")));
                }
                optimizer.step(p);
            }
        }
        let count = samples.len() as f64;
        let log = EpochLog {
            epoch,
            terms: LossTerms {
                total: sum.total / count,
                l1: sum.l1 / count,
                l2: sum.l2 / count,
                l3: sum.l3 / count,
            },
        };
        log::debug!("epoch {epoch}: loss {:.6}", log.terms.total);
        on_epoch(&log);
        report.epochs.push(log);
    }
    Ok(report)
}

/// Mean loss terms of `samples` under inference-mode predictions.
pub fn evaluate(net: &DehazeNet<f32>, samples: &[TrainSample], objective: &Objective) -> Result<LossTerms> {
    if samples.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let w = net.patch_size();
    let plane = w * w;
    let mut sum = LossTerms::default();
    for chunk in samples.chunks(16) {
        let planar: Vec<[Vec<f32>; 4]> = chunk.iter().map(TrainSample::planar).collect();
        let input = stack(planar.iter().map(|p| p[0].clone()), [chunk.len(), 3, w, w])?;
        let out = net.infer(&input)?;
        let mut scratch_t = vec![0.0f32; plane];
        let mut scratch_a = vec![0.0f32; 3 * plane];
        for (k, [hazy, clean, t, a]) in planar.iter().enumerate() {
            let terms = patch_loss(
                PatchTargets {
                    hazy,
                    clean,
                    t_true: t,
                    a_true: a,
                },
                out.t.item(k),
                out.a.item(k),
                objective,
                1.0,
                &mut scratch_t,
                &mut scratch_a,
            );
            sum.total += terms.total;
            sum.l1 += terms.l1;
            sum.l2 += terms.l2;
            sum.l3 += terms.l3;
        }
    }
    let n = samples.len() as f64;
    Ok(LossTerms {
        total: sum.total / n,
        l1: sum.l1 / n,
        l2: sum.l2 / n,
        l3: sum.l3 / n,
    })
}
