//! Dynamic kernel generation: `K` expert kernels mixed per sample by the
//! attention weights of a [`MappingNetwork`], applied to the whole batch as
//! one grouped convolution with `G·B` groups.

use crate::conv::{conv3d_naive, ConvSpec};
use crate::error::{Error, Result};
use crate::mapping::{MappingConfig, MappingNetwork};
use crate::params::{ParamId, ParamKind, ParamStore, Session};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, Var};

#[derive(Debug, Clone)]
pub struct ExpertConv {
    /// `K × C_out × (C_in/G) × S × S × S`
    pub weight: ParamId,
    /// `K × C_out`
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
    pub experts: usize,
    pub mapping: MappingNetwork,
}

impl ExpertConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        spec: ConvSpec,
        experts: usize,
        bias: bool,
        mapping: &MappingConfig,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        spec.validate()?;
        if experts == 0 {
            return Err(Error::param("at least one expert kernel is required"));
        }
        let mut shape = vec![experts];
        shape.extend(spec.weight_shape());
        let weight = store.register(
            &format!("{prefix}.experts.weight"),
            Tensor::zeros(&shape),
            ParamKind::Trainable,
        )?;
        let bias = if bias {
            Some(store.register(
                &format!("{prefix}.experts.bias"),
                Tensor::zeros(&[experts, spec.out_channels]),
                ParamKind::Trainable,
            )?)
        } else {
            None
        };
        let mapping = MappingNetwork::new(
            store,
            &format!("{prefix}.mapping"),
            spec.in_channels,
            experts,
            mapping,
            rng,
        )?;
        let layer = ExpertConv {
            weight,
            bias,
            spec,
            experts,
            mapping,
        };
        layer.init_expert_kernels(store, rng.index(usize::MAX) as u64)?;
        Ok(layer)
    }

    /// Redraws every expert kernel from a ±2σ truncated normal with
    /// `σ = sqrt(2 / fan_in)`, and zeroes the biases.
    pub fn init_expert_kernels<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        seed: u64,
    ) -> Result<()> {
        let mut rng = SeededRng::new(seed);
        let std = (2.0 / self.spec.fan_in() as f64).sqrt();
        for v in store.get_mut(self.weight)?.data_mut() {
            *v = T::from_f64(rng.truncated_normal(std));
        }
        if let Some(b) = self.bias {
            store.get_mut(b)?.data_mut().fill(T::zero());
        }
        Ok(())
    }

    /// Per-sample kernels `mm(α, W.view(K, −1)).view(B·C_out, C_in/G, S, S, S)`
    /// and biases `mm(α, b).view(−1)`.
    pub fn aggregate_kernels<T: Scalar>(
        &self,
        sess: &mut Session<'_, T>,
        alpha: Var,
    ) -> Result<(Var, Option<Var>)> {
        let a_shape = sess.tape.shape(alpha)?.to_vec();
        if a_shape.len() != 2 || a_shape[1] != self.experts {
            return Err(Error::shape(format!(
                "attention {a_shape:?} does not match {} experts",
                self.experts
            )));
        }
        let batch = a_shape[0];
        let ws = self.spec.weight_shape();
        let per_expert: usize = ws.iter().product();
        let w = sess.param(self.weight)?;
        let flat = sess.tape.reshape(w, &[self.experts, per_expert])?;
        let mixed = sess.tape.matmul(alpha, flat)?;
        let agg_w = sess
            .tape
            .reshape(mixed, &[batch * ws[0], ws[1], ws[2], ws[3], ws[4]])?;
        let agg_b = match self.bias {
            Some(b) => {
                let bv = sess.param(b)?;
                let mixed = sess.tape.matmul(alpha, bv)?;
                Some(
                    sess.tape
                        .reshape(mixed, &[batch * self.spec.out_channels])?,
                )
            }
            None => None,
        };
        Ok((agg_w, agg_b))
    }

    /// Attention from the layer's own input, then the batch-merged convolution.
    pub fn forward<T: Scalar>(&self, sess: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let alpha = self.mapping.attention(sess, x)?;
        self.forward_with_alpha(sess, x, alpha)
    }

    /// The batch-merged convolution for externally supplied attention weights.
    pub fn forward_with_alpha<T: Scalar>(
        &self,
        sess: &mut Session<'_, T>,
        x: Var,
        alpha: Var,
    ) -> Result<Var> {
        let xs = sess.tape.shape(x)?.to_vec();
        if xs.len() != 5 || xs[1] != self.spec.in_channels {
            return Err(Error::shape(format!(
                "dynamic conv expects B×{}×D×H×W, got {xs:?}",
                self.spec.in_channels
            )));
        }
        let batch = xs[0];
        if sess.tape.shape(alpha)?.first() != Some(&batch) {
            return Err(Error::shape("attention batch does not match input batch"));
        }
        let (agg_w, agg_b) = self.aggregate_kernels(sess, alpha)?;
        let merged = sess
            .tape
            .reshape(x, &[1, batch * xs[1], xs[2], xs[3], xs[4]])?;
        let spec = ConvSpec {
            in_channels: batch * self.spec.in_channels,
            out_channels: batch * self.spec.out_channels,
            groups: batch * self.spec.groups,
            ..self.spec
        };
        let y = sess.tape.conv3d(merged, agg_w, agg_b, &spec)?;
        let ys = sess.tape.shape(y)?.to_vec();
        sess.tape
            .reshape(y, &[batch, self.spec.out_channels, ys[2], ys[3], ys[4]])
    }
}

/// Reference dynamic convolution: for each sample, mixes `W_dyn = Σ_k α_k W_k`
/// (and the bias) with plain loops and runs [`conv3d_naive`] on that sample.
pub fn dynamic_conv_per_sample_oracle<T: Scalar>(
    x: &Tensor<T>,
    alpha: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    if xs.len() != 5 {
        return Err(Error::shape(format!(
            "oracle input must be 5-D, got {xs:?}"
        )));
    }
    let (batch, k) = (xs[0], weight.shape()[0]);
    if alpha.shape() != [batch, k] {
        return Err(Error::shape(format!(
            "alpha {:?} does not match batch {batch} and {k} experts",
            alpha.shape()
        )));
    }
    let per_expert: usize = spec.weight_shape().iter().product();
    if weight.len() != k * per_expert {
        return Err(Error::shape("expert weight does not match the conv spec"));
    }
    let sample_len = x.len() / batch;
    let mut outputs = Vec::new();
    let mut out_shape = Vec::new();
    for b in 0..batch {
        let mut w = vec![0.0f64; per_expert];
        for e in 0..k {
            let a = alpha.data()[b * k + e].as_f64();
            for (acc, v) in w
                .iter_mut()
                .zip(&weight.data()[e * per_expert..(e + 1) * per_expert])
            {
                *acc += a * v.as_f64();
            }
        }
        let bias_b = bias.map(|bt| {
            let c = spec.out_channels;
            let mixed: Vec<f64> = (0..c)
                .map(|o| {
                    (0..k)
                        .map(|e| alpha.data()[b * k + e].as_f64() * bt.data()[e * c + o].as_f64())
                        .sum()
                })
                .collect();
            Tensor::<T>::from_f64(&[c], &mixed)
        });
        let w = Tensor::<T>::from_f64(&spec.weight_shape(), &w)?;
        let xb = Tensor::new(
            [1].iter().chain(&xs[1..]).copied().collect(),
            x.data()[b * sample_len..(b + 1) * sample_len].to_vec(),
        )?;
        let bias_b = bias_b.transpose()?;
        let y = conv3d_naive(&xb, &w, bias_b.as_ref(), spec)?;
        out_shape = y.shape().to_vec();
        outputs.extend_from_slice(y.data());
    }
    out_shape[0] = batch;
    Tensor::new(out_shape, outputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::conv3d_forward;

    fn layer(store: &mut ParamStore<f64>, spec: ConvSpec, k: usize) -> ExpertConv {
        let mut rng = SeededRng::new(17);
        let l = ExpertConv::new(
            store,
            "dyn",
            spec,
            k,
            true,
            &MappingConfig::default(),
            &mut rng,
        )
        .unwrap();
        // non-zero biases so the bias path is exercised
        let b = l.bias.unwrap();
        for (i, v) in store.get_mut(b).unwrap().data_mut().iter_mut().enumerate() {
            *v = (i as f64 * 0.37).sin();
        }
        l
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = SeededRng::new(seed);
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn init_statistics_and_determinism() {
        let spec = ConvSpec::new(16, 16, 3).groups(2); // fan_in 8·27 = 216
        let mut store = ParamStore::new();
        let l = ExpertConv::new(
            &mut store,
            "d",
            spec,
            4,
            true,
            &MappingConfig::default(),
            &mut SeededRng::new(1),
        )
        .unwrap();
        l.init_expert_kernels(&mut store, 99).unwrap();
        let w = store.get(l.weight).unwrap().clone();
        assert!(w.len() >= 10_000);
        let std = (2.0 / 216.0f64).sqrt();
        let n = w.len() as f64;
        let mean = w.data().iter().sum::<f64>() / n;
        let sd = (w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!(mean.abs() < 3.0 * sd / n.sqrt(), "mean {mean}");
        assert!(w.data().iter().all(|v| v.abs() <= 2.0 * std));
        assert!(store
            .get(l.bias.unwrap())
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let mut other = store.clone();
        l.init_expert_kernels(&mut other, 99).unwrap();
        assert_eq!(other.get(l.weight).unwrap().data(), w.data());
    }

    #[test]
    fn aggregate_matches_loop() {
        let spec = ConvSpec::new(4, 2, 3).groups(2);
        let mut store = ParamStore::new();
        let l = layer(&mut store, spec, 3);
        let w = store.get(l.weight).unwrap().clone();
        let b = store.get(l.bias.unwrap()).unwrap().clone();
        let alpha = Tensor::from_f64(&[2, 3], &[0.2, 0.5, 0.3, 0.7, 0.1, 0.2]).unwrap();
        let mut sess = Session::new(&mut store, true);
        let a = sess.input(alpha.clone());
        let (aw, ab) = l.aggregate_kernels(&mut sess, a).unwrap();
        let aw = sess.value(aw).unwrap().clone();
        let ab = sess.value(ab.unwrap()).unwrap().clone();
        assert_eq!(aw.shape(), &[4, 2, 3, 3, 3]);
        let per = 2 * 2 * 27;
        for s in 0..2 {
            for i in 0..per {
                let e: f64 = (0..3)
                    .map(|k| alpha.data()[s * 3 + k] * w.data()[k * per + i])
                    .sum();
                assert!((aw.data()[s * per + i] - e).abs() < 1e-14);
            }
            for o in 0..2 {
                let e: f64 = (0..3)
                    .map(|k| alpha.data()[s * 3 + k] * b.data()[k * 2 + o])
                    .sum();
                assert!((ab.data()[s * 2 + o] - e).abs() < 1e-14);
            }
        }
        let bad = sess.input(Tensor::zeros(&[2, 4]));
        assert!(matches!(
            l.aggregate_kernels(&mut sess, bad),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn one_hot_and_single_expert_selection() {
        let spec = ConvSpec::new(2, 2, 1);
        let mut store = ParamStore::new();
        let l = layer(&mut store, spec, 4);
        let w = store.get(l.weight).unwrap().clone();
        let mut sess = Session::new(&mut store, true);
        let a = sess
            .input(Tensor::from_f64(&[2, 4], &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap());
        let (aw, _) = l.aggregate_kernels(&mut sess, a).unwrap();
        let aw = sess.value(aw).unwrap();
        assert_eq!(&aw.data()[..4], &w.data()[8..12]);
        assert_eq!(&aw.data()[4..], &w.data()[8..12]);

        let mut store = ParamStore::new();
        let l = layer(&mut store, spec, 1);
        let w = store.get(l.weight).unwrap().clone();
        let mut sess = Session::new(&mut store, true);
        let a = sess.input(Tensor::from_f64(&[3, 1], &[1.0, 1.0, 1.0]).unwrap());
        let (aw, _) = l.aggregate_kernels(&mut sess, a).unwrap();
        let aw = sess.value(aw).unwrap();
        for s in 0..3 {
            assert_eq!(&aw.data()[s * 4..(s + 1) * 4], w.data());
        }
    }

    #[test]
    fn batch_of_one_is_static_conv_with_mixed_kernel() {
        let spec = ConvSpec::new(4, 4, 3).padding(1).groups(2);
        let mut store = ParamStore::new();
        let l = layer(&mut store, spec, 3);
        let x = random(&[1, 4, 3, 4, 5], 2);
        let mut sess = Session::new(&mut store, false);
        let xv = sess.input(x.clone());
        let alpha = l.mapping.attention(&mut sess, xv).unwrap();
        let av = sess.value(alpha).unwrap().clone();
        let y = l.forward_with_alpha(&mut sess, xv, alpha).unwrap();
        let y = sess.value(y).unwrap().clone();
        let w = store.get(l.weight).unwrap();
        let b = store.get(l.bias.unwrap()).unwrap();
        let per = w.len() / 3;
        let mixed: Vec<f64> = (0..per)
            .map(|i| (0..3).map(|k| av.data()[k] * w.data()[k * per + i]).sum())
            .collect();
        let mb: Vec<f64> = (0..4)
            .map(|o| (0..3).map(|k| av.data()[k] * b.data()[k * 4 + o]).sum())
            .collect();
        let expect = conv3d_forward(
            &x,
            &Tensor::from_f64(&spec.weight_shape(), &mixed).unwrap(),
            Some(&Tensor::from_f64(&[4], &mb).unwrap()),
            &spec,
        )
        .unwrap();
        assert!(y.max_abs_diff(&expect).unwrap() < 1e-12);
    }

    #[test]
    fn uniform_attention_applies_mean_kernel() {
        let spec = ConvSpec::new(2, 2, 3).padding(1);
        let mut store = ParamStore::new();
        let l = layer(&mut store, spec, 4);
        for g in l.mapping.gate_ids() {
            store.get_mut(g).unwrap().data_mut()[0] = 0.0;
        }
        let fc = l.mapping.final_conv().clone();
        store.get_mut(fc.weight).unwrap().data_mut().fill(0.0);
        store
            .get_mut(fc.bias.unwrap())
            .unwrap()
            .data_mut()
            .fill(0.0);
        let w = store.get(l.weight).unwrap().clone();
        let b = store.get(l.bias.unwrap()).unwrap().clone();
        let per = w.len() / 4;
        let mean_w: Vec<f64> = (0..per)
            .map(|i| (0..4).map(|k| w.data()[k * per + i]).sum::<f64>() / 4.0)
            .collect();
        let mean_b: Vec<f64> = (0..2)
            .map(|o| (0..4).map(|k| b.data()[k * 2 + o]).sum::<f64>() / 4.0)
            .collect();
        let x = random(&[3, 2, 3, 3, 4], 8);
        let mut sess = Session::new(&mut store, true);
        let xv = sess.input(x.clone());
        let y = l.forward(&mut sess, xv).unwrap();
        let y = sess.value(y).unwrap().clone();
        let expect = conv3d_forward(
            &x,
            &Tensor::from_f64(&spec.weight_shape(), &mean_w).unwrap(),
            Some(&Tensor::from_f64(&[2], &mean_b).unwrap()),
            &spec,
        )
        .unwrap();
        assert!(y.max_abs_diff(&expect).unwrap() < 1e-12);
    }

    #[test]
    fn merged_batch_matches_oracle() {
        let spec = ConvSpec::new(4, 4, 3).padding(1).groups(2);
        let mut store = ParamStore::new();
        let l = layer(&mut store, spec, 4);
        let x = random(&[3, 4, 4, 3, 5], 12);
        let mut sess = Session::new(&mut store, true);
        let xv = sess.input(x.clone());
        let alpha = l.mapping.attention(&mut sess, xv).unwrap();
        let y = l.forward_with_alpha(&mut sess, xv, alpha).unwrap();
        let (y, av) = (
            sess.value(y).unwrap().clone(),
            sess.value(alpha).unwrap().clone(),
        );
        let oracle = dynamic_conv_per_sample_oracle(
            &x,
            &av,
            store.get(l.weight).unwrap(),
            Some(store.get(l.bias.unwrap()).unwrap()),
            &spec,
        )
        .unwrap();
        assert!(y.max_abs_diff(&oracle).unwrap() < 1e-10);
    }

    #[test]
    fn oracle_identical_samples_identical_outputs() {
        let spec = ConvSpec::new(2, 2, 3).padding(1);
        let mut store = ParamStore::new();
        let l = layer(&mut store, spec, 2);
        let one = random(&[1, 2, 2, 2, 2], 3);
        let mut data = one.data().to_vec();
        data.extend_from_slice(one.data());
        let x = Tensor::new(vec![2, 2, 2, 2, 2], data).unwrap();
        let alpha = Tensor::from_f64(&[2, 2], &[0.3, 0.7, 0.3, 0.7]).unwrap();
        let y =
            dynamic_conv_per_sample_oracle(&x, &alpha, store.get(l.weight).unwrap(), None, &spec)
                .unwrap();
        assert_eq!(&y.data()[..16], &y.data()[16..]);
        let bad = Tensor::from_f64(&[1, 2], &[0.5, 0.5]).unwrap();
        assert!(dynamic_conv_per_sample_oracle(
            &x,
            &bad,
            store.get(l.weight).unwrap(),
            None,
            &spec
        )
        .is_err());
    }
}
