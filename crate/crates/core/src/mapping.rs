//! Context-aware mapping network: pools the layer input to a per-channel
//! context vector, refines it through gated residual blocks of 1×1×1
//! convolutions and projects it to one logit per expert kernel. Attention
//! weights are the temperature softmax of those logits.

use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv};
use crate::params::{ParamId, ParamKind, ParamStore, Session};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, Var};

/// Linear annealing `τ(e) = τ_end + (τ_start − τ_end)·max(0, 1 − e/anneal_epochs)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemperatureSchedule {
    pub start: f64,
    pub end: f64,
    pub anneal_epochs: usize,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        TemperatureSchedule {
            start: 30.0,
            end: 1.0,
            anneal_epochs: 10,
        }
    }
}

impl TemperatureSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.end > 0.0) || self.start < self.end {
            return Err(Error::param(format!(
                "temperature schedule needs τ_start ≥ τ_end > 0, got {} → {}",
                self.start, self.end
            )));
        }
        Ok(())
    }

    pub fn at(&self, epoch: usize) -> f64 {
        let frac = if self.anneal_epochs == 0 {
            0.0
        } else {
            (1.0 - epoch as f64 / self.anneal_epochs as f64).max(0.0)
        };
        self.end + (self.start - self.end) * frac
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MappingConfig {
    /// Residual blocks `N`.
    pub blocks: usize,
    /// Bottleneck reduction `r`: hidden width is `max(C / r, K)`.
    pub reduction: usize,
    /// Initial value of every residual gate.
    pub gate_init: f64,
    pub schedule: TemperatureSchedule,
}

impl Default for MappingConfig {
    fn default() -> Self {
        MappingConfig {
            blocks: 2,
            reduction: 16,
            gate_init: 0.25,
            schedule: TemperatureSchedule::default(),
        }
    }
}

#[derive(Debug, Clone)]
struct ResidualBlock {
    bn: BatchNorm,
    conv: Conv,
    gate: ParamId,
    skip: Option<Conv>,
}

#[derive(Debug, Clone)]
pub struct MappingNetwork {
    blocks: Vec<ResidualBlock>,
    final_bn: BatchNorm,
    final_conv: Conv,
    tau: ParamId,
    pub schedule: TemperatureSchedule,
    pub in_channels: usize,
    pub hidden_channels: usize,
    pub experts: usize,
}

impl MappingNetwork {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_channels: usize,
        experts: usize,
        cfg: &MappingConfig,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if experts == 0 || in_channels == 0 || cfg.reduction == 0 {
            return Err(Error::param(
                "mapping network needs positive C, K and reduction",
            ));
        }
        cfg.schedule.validate()?;
        let hidden = (in_channels / cfg.reduction).max(experts);
        let mut blocks = Vec::with_capacity(cfg.blocks);
        let mut width = in_channels;
        for i in 0..cfg.blocks {
            let p = format!("{prefix}.block{i}");
            let bn = BatchNorm::new(store, &format!("{p}.bn"), width)?;
            let conv = Conv::new(
                store,
                &format!("{p}.conv"),
                ConvSpec::new(width, hidden, 1),
                true,
                rng,
            )?;
            let gate = store.register(
                &format!("{p}.gate"),
                Tensor::scalar(T::from_f64(cfg.gate_init)),
                ParamKind::Trainable,
            )?;
            let skip = if width != hidden {
                Some(Conv::new(
                    store,
                    &format!("{p}.skip"),
                    ConvSpec::new(width, hidden, 1),
                    false,
                    rng,
                )?)
            } else {
                None
            };
            blocks.push(ResidualBlock {
                bn,
                conv,
                gate,
                skip,
            });
            width = hidden;
        }
        let final_bn = BatchNorm::new(store, &format!("{prefix}.out_bn"), width)?;
        let final_conv = Conv::new(
            store,
            &format!("{prefix}.out_conv"),
            ConvSpec::new(width, experts, 1),
            true,
            rng,
        )?;
        let tau = store.register(
            &format!("{prefix}.tau"),
            Tensor::scalar(T::from_f64(cfg.schedule.start)),
            ParamKind::Buffer,
        )?;
        Ok(MappingNetwork {
            blocks,
            final_bn,
            final_conv,
            tau,
            schedule: cfg.schedule,
            in_channels,
            hidden_channels: hidden,
            experts,
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn gate_ids(&self) -> Vec<ParamId> {
        self.blocks.iter().map(|b| b.gate).collect()
    }

    pub fn final_conv(&self) -> &Conv {
        &self.final_conv
    }

    pub fn tau<T: Scalar>(&self, store: &ParamStore<T>) -> Result<f64> {
        Ok(store.get(self.tau)?.data()[0].as_f64())
    }

    pub fn set_tau<T: Scalar>(&self, store: &mut ParamStore<T>, tau: f64) -> Result<()> {
        if !(tau > 0.0) {
            return Err(Error::param(format!(
                "temperature must be positive, got {tau}"
            )));
        }
        store.get_mut(self.tau)?.data_mut()[0] = T::from_f64(tau);
        Ok(())
    }

    /// Sets τ from the annealing schedule for `epoch`.
    pub fn update_temperature<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        epoch: usize,
    ) -> Result<()> {
        self.set_tau(store, self.schedule.at(epoch))
    }

    /// `g = AvgPool3d(x)`, shape `B×C×1×1×1`.
    pub fn extract_context<T: Scalar>(&self, sess: &mut Session<'_, T>, x: Var) -> Result<Var> {
        sess.tape.adaptive_avg_pool3d_to_unit(x)
    }

    /// Expert logits `B×K` from the pooled context.
    pub fn forward<T: Scalar>(&self, sess: &mut Session<'_, T>, g: Var) -> Result<Var> {
        let shape = sess.tape.shape(g)?.to_vec();
        if shape.len() != 5 || shape[1] != self.in_channels || shape[2..] != [1, 1, 1] {
            return Err(Error::shape(format!(
                "mapping network expects B×{}×1×1×1 context, got {shape:?}",
                self.in_channels
            )));
        }
        let mut h = g;
        for block in &self.blocks {
            let n = block.bn.forward(sess, h)?;
            let a = sess.tape.gelu(n)?;
            let c = block.conv.forward(sess, a)?;
            let gate = sess.param(block.gate)?;
            let r = sess.tape.mul_scalar(c, gate)?;
            let skip = match &block.skip {
                Some(proj) => proj.forward(sess, h)?,
                None => h,
            };
            h = sess.tape.add(r, skip)?;
        }
        let n = self.final_bn.forward(sess, h)?;
        let attn = self.final_conv.forward(sess, n)?;
        sess.tape.reshape(attn, &[shape[0], self.experts])
    }

    /// `α = Softmax(attn / τ)` using the current temperature.
    pub fn attention<T: Scalar>(&self, sess: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let g = self.extract_context(sess, x)?;
        let logits = self.forward(sess, g)?;
        let tau = self.tau(sess.store())?;
        attention_weights(sess, logits, tau)
    }
}

/// Per-row temperature softmax of `B×K` logits.
pub fn attention_weights<T: Scalar>(sess: &mut Session<'_, T>, attn: Var, tau: f64) -> Result<Var> {
    if sess.tape.shape(attn)?.len() != 2 {
        return Err(Error::shape("attention logits must be B×K"));
    }
    sess.tape.softmax(attn, tau, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::kernels::softmax_with_temperature;

    fn net(store: &mut ParamStore<f64>, c: usize, k: usize, blocks: usize) -> MappingNetwork {
        let cfg = MappingConfig {
            blocks,
            ..MappingConfig::default()
        };
        MappingNetwork::new(store, "map", c, k, &cfg, &mut SeededRng::new(4)).unwrap()
    }

    #[test]
    fn schedule_points() {
        let s = TemperatureSchedule::default();
        assert_eq!(s.at(0), 30.0);
        assert_eq!(s.at(5), 15.5);
        assert_eq!(s.at(10), 1.0);
        assert_eq!(s.at(400), 1.0);
        assert!((0..30).all(|e| s.at(e + 1) <= s.at(e)));
    }

    #[test]
    fn hidden_width_and_skip_projection() {
        let mut store = ParamStore::new();
        let m = net(&mut store, 64, 4, 2);
        assert_eq!(m.hidden_channels, 4);
        assert!(store.id("map.block0.skip.weight").is_some());
        assert!(store.id("map.block1.skip.weight").is_none());
        let m = net(&mut ParamStore::new(), 4, 4, 2);
        assert_eq!(m.hidden_channels, 4);
        let m = net(&mut ParamStore::new(), 128, 2, 1);
        assert_eq!(m.hidden_channels, 8);
    }

    #[test]
    fn context_of_impulse_and_constant() {
        let mut store = ParamStore::new();
        let m = net(&mut store, 1, 2, 1);
        let mut sess = Session::new(&mut store, false);
        let mut imp = Tensor::<f64>::zeros(&[1, 1, 2, 2, 2]);
        imp.data_mut()[5] = 1.0;
        let x = sess.input(imp);
        let g = m.extract_context(&mut sess, x).unwrap();
        assert_eq!(sess.value(g).unwrap().data(), &[0.125]);
        let c = sess.input(Tensor::full(&[2, 1, 3, 2, 2], 2.5));
        let g = m.extract_context(&mut sess, c).unwrap();
        assert_eq!(sess.value(g).unwrap().data(), &[2.5, 2.5]);
        let bad = sess.input(Tensor::zeros(&[2, 3]));
        assert!(m.extract_context(&mut sess, bad).is_err());
    }

    #[test]
    fn annihilated_network_gives_uniform_attention() {
        let mut store = ParamStore::new();
        let m = net(&mut store, 8, 4, 2);
        for gate in m.gate_ids() {
            store.get_mut(gate).unwrap().data_mut()[0] = 0.0;
        }
        store
            .get_mut(m.final_conv().weight)
            .unwrap()
            .data_mut()
            .fill(0.0);
        let mut sess = Session::new(&mut store, true);
        let x = sess.input(
            Tensor::from_f64(
                &[3, 8, 1, 1, 1],
                &(0..24).map(|i| (i as f64).cos()).collect::<Vec<_>>(),
            )
            .unwrap(),
        );
        let a = m.attention(&mut sess, x).unwrap();
        assert!(sess.value(a).unwrap().data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn zero_blocks_is_projection_of_normalized_context() {
        let mut store = ParamStore::new();
        let m = net(&mut store, 4, 3, 0);
        let g = Tensor::from_f64(
            &[2, 4, 1, 1, 1],
            &[0.1, 0.5, -0.3, 2.0, 1.0, -0.5, 0.7, 0.0],
        )
        .unwrap();
        let w = store.get(m.final_conv().weight).unwrap().clone();
        let mut sess = Session::new(&mut store, true);
        let gv = sess.input(g.clone());
        let logits = m.forward(&mut sess, gv).unwrap();
        let out = sess.value(logits).unwrap().clone();
        // BN over a batch of two maps each channel to ±1 (up to epsilon).
        for n in 0..2 {
            for k in 0..3 {
                let mut acc = 0.0;
                for c in 0..4 {
                    let (a, b) = (g.data()[c], g.data()[4 + c]);
                    let mean = 0.5 * (a + b);
                    let var = 0.25 * (a - b) * (a - b);
                    let v = if n == 0 { a } else { b };
                    acc += w.data()[k * 4 + c] * (v - mean) / (var + 1e-5).sqrt();
                }
                assert!((out.data()[n * 3 + k] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hand_rolled_forward_oracle() {
        // B=1, C=4, K=4 in eval mode with perturbed running statistics; the
        // oracle walks the recurrence with plain scalars.
        let mut store = ParamStore::<f64>::new();
        let m = net(&mut store, 4, 4, 2);
        let mut rng = SeededRng::new(21);
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).unwrap().to_string();
            let t = store.get_mut(id).unwrap();
            for v in t.data_mut() {
                *v = if name.ends_with("running_var") {
                    rng.uniform(0.5, 2.0)
                } else if name.ends_with("tau") {
                    *v
                } else {
                    rng.uniform(-1.0, 1.0)
                };
            }
        }
        let g = [0.3, -1.2, 0.8, 0.05];
        let p = |name: &str| store.get(store.id(name).unwrap()).unwrap().data().to_vec();
        let gelu = |x: f64| x * 0.5 * (1.0 + libm::erf(x / 2f64.sqrt()));
        let bn = |h: &[f64], pre: &str| -> Vec<f64> {
            let (ga, be, rm, rv) = (
                p(&format!("{pre}.gamma")),
                p(&format!("{pre}.beta")),
                p(&format!("{pre}.running_mean")),
                p(&format!("{pre}.running_var")),
            );
            (0..h.len())
                .map(|c| ga[c] * (h[c] - rm[c]) / (rv[c] + 1e-5).sqrt() + be[c])
                .collect()
        };
        let conv = |h: &[f64], pre: &str, out: usize| -> Vec<f64> {
            let w = p(&format!("{pre}.weight"));
            let b = store
                .id(&format!("{pre}.bias"))
                .map(|_| p(&format!("{pre}.bias")));
            (0..out)
                .map(|o| {
                    (0..h.len()).map(|c| w[o * h.len() + c] * h[c]).sum::<f64>()
                        + b.as_ref().map_or(0.0, |b| b[o])
                })
                .collect()
        };
        let mut h = g.to_vec();
        for i in 0..2 {
            let a: Vec<f64> = bn(&h, &format!("map.block{i}.bn"))
                .into_iter()
                .map(gelu)
                .collect();
            let c = conv(&a, &format!("map.block{i}.conv"), 4);
            let gate = p(&format!("map.block{i}.gate"))[0];
            h = c.iter().zip(&h).map(|(c, h)| gate * c + h).collect();
        }
        let expected = conv(&bn(&h, "map.out_bn"), "map.out_conv", 4);

        let mut sess = Session::new(&mut store, false);
        let gv = sess.input(Tensor::from_f64(&[1, 4, 1, 1, 1], &g).unwrap());
        let logits = m.forward(&mut sess, gv).unwrap();
        for (a, e) in sess.value(logits).unwrap().data().iter().zip(&expected) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn attention_weight_values() {
        let y = softmax_with_temperature(&[1.0f64, 2.0, 3.0], &[1, 3], 2.0, 1).unwrap();
        // exp-normalize of (0.5, 1, 1.5) with 50-digit arithmetic
        let expected = [
            0.186_323_723_225_847_58,
            0.307_195_885_718_498_4,
            0.506_480_391_055_654,
        ];
        for (a, e) in y.iter().zip(expected) {
            assert!((a - e).abs() < 1e-15);
        }
        let mut store = ParamStore::new();
        let mut sess = Session::<f64>::new(&mut store, false);
        let l = sess.input(Tensor::from_f64(&[1, 4], &[20.0, 0.0, 0.0, 0.0]).unwrap());
        let a = attention_weights(&mut sess, l, 1.0).unwrap();
        assert!(sess.value(a).unwrap().data()[0] >= 1.0 - 1e-8);
        assert!(attention_weights(&mut sess, l, 0.0).is_err());
    }

    #[test]
    fn update_temperature_writes_store() {
        let mut store = ParamStore::new();
        let m = net(&mut store, 4, 4, 1);
        assert_eq!(m.tau(&store).unwrap(), 30.0);
        m.update_temperature(&mut store, 5).unwrap();
        assert_eq!(m.tau(&store).unwrap(), 15.5);
        m.update_temperature(&mut store, 12).unwrap();
        assert_eq!(m.tau(&store).unwrap(), 1.0);
    }
}
