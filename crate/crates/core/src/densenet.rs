//! The modified 3D-DenseNet: growth rate doubling per stage, fully dense
//! cross-stage links through average pooling, and expert-kernel dynamic
//! convolutions as the 3×3×3 feature extractor of every dense layer.

use std::collections::BTreeMap;

use crate::conv::ConvSpec;
use crate::error::{Error, Result};
use crate::expert::ExpertConv;
use crate::mapping::{MappingConfig, MappingNetwork, TemperatureSchedule};
use crate::nn::{BatchNorm, Conv, Linear};
use crate::params::{ParamStore, Session};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::kernels::pooled_extent;
use crate::tensor::{Tensor, Var};

/// `k = 2^(m−1)·k0` for the 1-based stage index `m`.
pub fn growth_rate(stage: usize, k0: usize) -> Result<usize> {
    if stage < 1 {
        return Err(Error::param("stage index is 1-based"));
    }
    Ok(k0 << (stage - 1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    /// Dense layers per stage.
    pub stages: Vec<usize>,
    /// Growth rate per stage; must equal `2^m·k0`.
    pub growth_rates: Vec<usize>,
    pub k0: usize,
    /// Groups of the dynamic 3×3×3 convolutions.
    pub groups: usize,
    /// Expert kernels per dynamic convolution.
    pub experts: usize,
    pub expert_bias: bool,
    pub mapping: MappingConfig,
    pub num_classes: usize,
    /// Spatial block side `M = N`.
    pub block_size: usize,
    /// Spectral extent `L`.
    pub bands: usize,
    /// Direct average-pooled links from the stem and earlier stages.
    pub cross_links: bool,
}

impl ArchConfig {
    pub fn new(
        stages: Vec<usize>,
        k0: usize,
        num_classes: usize,
        block_size: usize,
        bands: usize,
    ) -> Self {
        let growth_rates = (1..=stages.len()).map(|m| k0 << (m - 1)).collect();
        ArchConfig {
            stages,
            growth_rates,
            k0,
            groups: 4,
            experts: 4,
            expert_bias: true,
            mapping: MappingConfig::default(),
            num_classes,
            block_size,
            bands,
            cross_links: true,
        }
    }

    /// The base configuration: stages of 4, 6 and 8 layers at growth 8, 16, 32.
    pub fn base(num_classes: usize, bands: usize) -> Self {
        Self::new(vec![4, 6, 8], 8, num_classes, 15, bands)
    }

    /// Desk-scale configuration: two stages of two layers, `k0 = 4`.
    pub fn micro(num_classes: usize, block_size: usize, bands: usize) -> Self {
        Self::new(vec![2, 2], 4, num_classes, block_size, bands)
    }

    /// Re-derives the growth rates after `k0` or `stages` changed.
    pub fn with_k0(mut self, k0: usize) -> Self {
        self.k0 = k0;
        self.growth_rates = (1..=self.stages.len()).map(|m| k0 << (m - 1)).collect();
        self
    }

    pub fn stem_channels(&self) -> usize {
        2 * self.k0
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() || self.stages.contains(&0) {
            return Err(Error::config(
                "stages",
                "need at least one stage, each with ≥1 layer",
            ));
        }
        if self.growth_rates.len() != self.stages.len() {
            return Err(Error::config(
                "growth_rates",
                format!(
                    "{} growth rates for {} stages",
                    self.growth_rates.len(),
                    self.stages.len()
                ),
            ));
        }
        for (m, &g) in self.growth_rates.iter().enumerate() {
            if g != self.k0 << m {
                return Err(Error::config(
                    "growth_rates",
                    format!(
                        "stage {} has growth {g}, expected 2^{m}·{} = {}",
                        m + 1,
                        self.k0,
                        self.k0 << m
                    ),
                ));
            }
            if g % self.groups != 0 {
                return Err(Error::config(
                    "groups",
                    format!("growth rate {g} not divisible by {} groups", self.groups),
                ));
            }
        }
        let positive = [
            ("k0", self.k0),
            ("groups", self.groups),
            ("experts", self.experts),
            ("reduction", self.mapping.reduction),
            ("bands", self.bands),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "need at least two classes"));
        }
        if self.block_size == 0 || self.block_size.is_multiple_of(2) {
            return Err(Error::config(
                "block_size",
                format!("must be odd, got {}", self.block_size),
            ));
        }
        self.mapping
            .schedule
            .validate()
            .map_err(|e| Error::config("tau", e.to_string()))
    }

    /// Flat `key = value` rendering, used in checkpoints and reports.
    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let mut m = BTreeMap::new();
        m.insert("stages".into(), list(&self.stages));
        m.insert("growth_rates".into(), list(&self.growth_rates));
        m.insert("k0".into(), self.k0.to_string());
        m.insert("groups".into(), self.groups.to_string());
        m.insert("experts".into(), self.experts.to_string());
        m.insert("expert_bias".into(), self.expert_bias.to_string());
        m.insert("mapping_blocks".into(), self.mapping.blocks.to_string());
        m.insert("reduction".into(), self.mapping.reduction.to_string());
        m.insert("gate_init".into(), self.mapping.gate_init.to_string());
        m.insert("tau_start".into(), self.mapping.schedule.start.to_string());
        m.insert("tau_end".into(), self.mapping.schedule.end.to_string());
        m.insert(
            "anneal_epochs".into(),
            self.mapping.schedule.anneal_epochs.to_string(),
        );
        m.insert("num_classes".into(), self.num_classes.to_string());
        m.insert("block_size".into(), self.block_size.to_string());
        m.insert("bands".into(), self.bands.to_string());
        m.insert("cross_links".into(), self.cross_links.to_string());
        m
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        fn get<'a>(kv: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
            kv.get(key)
                .map(String::as_str)
                .ok_or_else(|| Error::config(key, "missing"))
        }
        fn num<V: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &str) -> Result<V> {
            let s = get(kv, key)?;
            s.parse()
                .map_err(|_| Error::config(key, format!("cannot parse `{s}`")))
        }
        fn list(kv: &BTreeMap<String, String>, key: &str) -> Result<Vec<usize>> {
            get(kv, key)?
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse()
                        .map_err(|_| Error::config(key, format!("cannot parse `{p}`")))
                })
                .collect()
        }
        let cfg = ArchConfig {
            stages: list(kv, "stages")?,
            growth_rates: list(kv, "growth_rates")?,
            k0: num(kv, "k0")?,
            groups: num(kv, "groups")?,
            experts: num(kv, "experts")?,
            expert_bias: num(kv, "expert_bias")?,
            mapping: MappingConfig {
                blocks: num(kv, "mapping_blocks")?,
                reduction: num(kv, "reduction")?,
                gate_init: num(kv, "gate_init")?,
                schedule: TemperatureSchedule {
                    start: num(kv, "tau_start")?,
                    end: num(kv, "tau_end")?,
                    anneal_epochs: num(kv, "anneal_epochs")?,
                },
            },
            num_classes: num(kv, "num_classes")?,
            block_size: num(kv, "block_size")?,
            bands: num(kv, "bands")?,
            cross_links: num(kv, "cross_links")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Where a block's input channels come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkSource {
    Stem,
    /// Output of the transition after stage `m`.
    Transition(usize),
    /// Features produced by the layers of stage `m`.
    StageFeatures(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Link {
    pub source: LinkSource,
    /// Average-pool factor applied before concatenation (1 = none).
    pub factor: usize,
    pub channels: usize,
}

#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub in_channels: usize,
    pub growth: usize,
    bn1: BatchNorm,
    bottleneck: Conv,
    bn2: BatchNorm,
    pub dynamic: ExpertConv,
}

impl DenseLayer {
    /// BN → GELU → 1×1×1 conv to 4k → BN → GELU → dynamic 3×3×3 conv to k.
    pub fn forward<T: Scalar>(&self, sess: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let c = sess.tape.shape(x)?[1];
        if c != self.in_channels {
            return Err(Error::shape(format!(
                "dense layer expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let h = self.bn1.forward(sess, x)?;
        let h = sess.tape.gelu(h)?;
        let h = self.bottleneck.forward(sess, h)?;
        let h = self.bn2.forward(sess, h)?;
        let h = sess.tape.gelu(h)?;
        self.dynamic.forward(sess, h)
    }

    pub fn bottleneck(&self) -> &Conv {
        &self.bottleneck
    }

    pub fn input_norm(&self) -> &BatchNorm {
        &self.bn1
    }
}

#[derive(Debug, Clone)]
pub struct Transition {
    pub bn: BatchNorm,
    pub conv: Conv,
}

/// The assembled network together with its link table.
#[derive(Debug, Clone)]
pub struct EkgNet {
    pub cfg: ArchConfig,
    stem: Conv,
    stages: Vec<Vec<DenseLayer>>,
    transitions: Vec<Transition>,
    links: Vec<Vec<Link>>,
    head_bn: BatchNorm,
    classifier: Linear,
}

impl EkgNet {
    /// Builds the graph, registering and initializing every parameter in `store`.
    pub fn build<T: Scalar>(
        cfg: &ArchConfig,
        store: &mut ParamStore<T>,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SeededRng::new(seed);
        let stem_ch = cfg.stem_channels();
        let stem = Conv::new(
            store,
            "stem",
            ConvSpec::new(1, stem_ch, 3).padding(1),
            false,
            &mut rng,
        )?;
        let mapping = cfg.mapping;
        let n_stages = cfg.stages.len();
        let mut stages = Vec::with_capacity(n_stages);
        let mut transitions = Vec::new();
        let mut links = Vec::with_capacity(n_stages);
        let mut stage_features = Vec::new();
        let mut trans_out = 0;
        let mut out_channels = 0;
        for m in 0..n_stages {
            let mut table = Vec::new();
            if m == 0 {
                table.push(Link {
                    source: LinkSource::Stem,
                    factor: 1,
                    channels: stem_ch,
                });
            } else {
                table.push(Link {
                    source: LinkSource::Transition(m - 1),
                    factor: 1,
                    channels: trans_out,
                });
                if cfg.cross_links {
                    table.push(Link {
                        source: LinkSource::Stem,
                        factor: 1 << m,
                        channels: stem_ch,
                    });
                    for (j, &ch) in stage_features.iter().enumerate().take(m - 1) {
                        table.push(Link {
                            source: LinkSource::StageFeatures(j),
                            factor: 1 << (m - j),
                            channels: ch,
                        });
                    }
                }
            }
            let k = cfg.growth_rates[m];
            let mut channels: usize = table.iter().map(|l| l.channels).sum();
            let mut layers = Vec::with_capacity(cfg.stages[m]);
            for i in 0..cfg.stages[m] {
                let p = format!("block{m}.layer{i}");
                let bn1 = BatchNorm::new(store, &format!("{p}.bn1"), channels)?;
                let bottleneck = Conv::new(
                    store,
                    &format!("{p}.conv1"),
                    ConvSpec::new(channels, 4 * k, 1),
                    false,
                    &mut rng,
                )?;
                let bn2 = BatchNorm::new(store, &format!("{p}.bn2"), 4 * k)?;
                let spec = ConvSpec::new(4 * k, k, 3).padding(1).groups(cfg.groups);
                let dynamic = ExpertConv::new(
                    store,
                    &format!("{p}.dyn"),
                    spec,
                    cfg.experts,
                    cfg.expert_bias,
                    &mapping,
                    &mut rng,
                )?;
                layers.push(DenseLayer {
                    in_channels: channels,
                    growth: k,
                    bn1,
                    bottleneck,
                    bn2,
                    dynamic,
                });
                channels += k;
            }
            stage_features.push(cfg.stages[m] * k);
            links.push(table);
            stages.push(layers);
            if m + 1 < n_stages {
                trans_out = (channels / 2).max(1);
                let p = format!("transition{m}");
                transitions.push(Transition {
                    bn: BatchNorm::new(store, &format!("{p}.bn"), channels)?,
                    conv: Conv::new(
                        store,
                        &format!("{p}.conv"),
                        ConvSpec::new(channels, trans_out, 1),
                        false,
                        &mut rng,
                    )?,
                });
            }
            out_channels = channels;
        }
        let head_bn = BatchNorm::new(store, "head.bn", out_channels)?;
        let classifier = Linear::new(store, "head.fc", out_channels, cfg.num_classes, &mut rng)?;
        let net = EkgNet {
            cfg: cfg.clone(),
            stem,
            stages,
            transitions,
            links,
            head_bn,
            classifier,
        };
        net.audit()?;
        Ok(net)
    }

    /// Checks that every layer's declared input width equals its link-table sum
    /// plus the features of the layers before it in the same stage.
    fn audit(&self) -> Result<()> {
        for (m, layers) in self.stages.iter().enumerate() {
            let base: usize = self.links[m].iter().map(|l| l.channels).sum();
            for (m_src, link) in self.links[m].iter().enumerate() {
                if !link.factor.is_power_of_two() {
                    return Err(Error::Consistency(format!(
                        "link {m_src} into stage {m} has factor {}",
                        link.factor
                    )));
                }
                let gap = match link.source {
                    LinkSource::Stem => m,
                    LinkSource::Transition(_) => 0,
                    LinkSource::StageFeatures(j) => m - j,
                };
                if link.factor != 1 << gap {
                    return Err(Error::Consistency(format!(
                        "link {:?} into stage {m} pools by {} across a gap of {gap}",
                        link.source, link.factor
                    )));
                }
            }
            let mut expected = base;
            for (i, layer) in layers.iter().enumerate() {
                if layer.in_channels != expected {
                    return Err(Error::Consistency(format!(
                        "stage {m} layer {i} declares {} inputs, link table gives {expected}",
                        layer.in_channels
                    )));
                }
                expected += layer.growth;
            }
        }
        Ok(())
    }

    pub fn growth_rates(&self) -> &[usize] {
        &self.cfg.growth_rates
    }

    pub fn links(&self, stage: usize) -> &[Link] {
        &self.links[stage]
    }

    pub fn stage_layers(&self, stage: usize) -> &[DenseLayer] {
        &self.stages[stage]
    }

    pub fn transition(&self, stage: usize) -> Option<&Transition> {
        self.transitions.get(stage)
    }

    pub fn stem(&self) -> &Conv {
        &self.stem
    }

    pub fn head(&self) -> (&BatchNorm, &Linear) {
        (&self.head_bn, &self.classifier)
    }

    /// Every mapping network, in layer order.
    pub fn mapping_networks(&self) -> impl Iterator<Item = &MappingNetwork> {
        self.stages.iter().flatten().map(|l| &l.dynamic.mapping)
    }

    pub fn update_temperature<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        epoch: usize,
    ) -> Result<()> {
        self.mapping_networks()
            .try_for_each(|m| m.update_temperature(store, epoch))
    }

    /// Current temperature (shared by every mapping network under one schedule).
    pub fn temperature<T: Scalar>(&self, store: &ParamStore<T>) -> Result<f64> {
        match self.mapping_networks().next() {
            Some(m) => m.tau(store),
            None => Ok(self.cfg.mapping.schedule.start),
        }
    }

    /// Unnormalized class logits for `x: B×1×L×M×N`.
    pub fn forward<T: Scalar>(&self, sess: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let xs = sess.tape.shape(x)?.to_vec();
        let expected = [1, self.cfg.bands, self.cfg.block_size, self.cfg.block_size];
        if xs.len() != 5 || xs[1..] != expected {
            return Err(Error::shape(format!(
                "model expects B×{}×{}×{}×{}, got {xs:?}",
                expected[0], expected[1], expected[2], expected[3]
            )));
        }
        let stem = self.stem.forward(sess, x)?;
        let mut new_features: Vec<Var> = Vec::new();
        let mut trans: Option<Var> = None;
        let mut full = stem;
        for (m, layers) in self.stages.iter().enumerate() {
            let mut feats = Vec::new();
            for link in &self.links[m] {
                let src = match link.source {
                    LinkSource::Stem => stem,
                    LinkSource::Transition(_) => {
                        trans.ok_or_else(|| Error::State("missing transition output".into()))?
                    }
                    LinkSource::StageFeatures(j) => new_features[j],
                };
                feats.push(sess.tape.avg_pool_down(src, link.factor)?);
            }
            let first_new = feats.len();
            for layer in layers {
                let inp = if feats.len() == 1 {
                    feats[0]
                } else {
                    sess.tape.concat(&feats, 1)?
                };
                let out = layer.forward(sess, inp)?;
                feats.push(out);
            }
            new_features.push(sess.tape.concat(&feats[first_new..], 1)?);
            full = sess.tape.concat(&feats, 1)?;
            if let Some(t) = self.transitions.get(m) {
                let h = t.bn.forward(sess, full)?;
                let h = sess.tape.gelu(h)?;
                let h = t.conv.forward(sess, h)?;
                trans = Some(sess.tape.avg_pool_down(h, 2)?);
            }
        }
        let h = self.head_bn.forward(sess, full)?;
        let h = sess.tape.gelu(h)?;
        let h = sess.tape.adaptive_avg_pool3d_to_unit(h)?;
        let b = xs[0];
        let h = sess.tape.reshape(h, &[b, self.classifier.in_features])?;
        self.classifier.forward(sess, h)
    }

    /// Convenience forward on a batch tensor; returns the logits.
    pub fn logits<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        x: Tensor<T>,
        training: bool,
    ) -> Result<Tensor<T>> {
        let mut sess = Session::new(store, training);
        let xv = sess.input(x);
        let y = self.forward(&mut sess, xv)?;
        Ok(sess.value(y)?.clone())
    }

    /// Spatial-spectral extents `(D, H, W)` entering each stage.
    pub fn stage_extents(&self) -> Vec<[usize; 3]> {
        let mut e = [self.cfg.bands, self.cfg.block_size, self.cfg.block_size];
        let mut out = Vec::new();
        for _ in 0..self.stages.len() {
            out.push(e);
            e = e.map(|v| pooled_extent(v, 2));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn growth_rate_formula() {
        assert_eq!(growth_rate(1, 8).unwrap(), 8);
        assert_eq!(growth_rate(2, 8).unwrap(), 16);
        assert_eq!(growth_rate(3, 8).unwrap(), 32);
        assert_eq!(growth_rate(1, 1).unwrap(), 1);
        assert!(growth_rate(0, 8).is_err());
        assert_eq!(ArchConfig::base(16, 200).growth_rates, vec![8, 16, 32]);
    }

    #[test]
    fn config_validation() {
        let mut c = ArchConfig::micro(3, 7, 24);
        c.growth_rates = vec![4, 12];
        assert!(
            matches!(c.validate(), Err(Error::Config { ref key, .. }) if key == "growth_rates")
        );
        let mut c = ArchConfig::micro(3, 7, 24);
        c.growth_rates.pop();
        assert!(c.validate().is_err());
        let c = ArchConfig::micro(3, 8, 24);
        assert!(c.validate().is_err());
        let c = ArchConfig::micro(3, 7, 24).with_k0(2);
        assert!(c.validate().is_err(), "growth 2 with 4 groups");
        let c = ArchConfig::micro(3, 7, 24);
        assert_eq!(ArchConfig::from_kv(&c.to_kv()).unwrap(), c);
    }

    #[test]
    fn doubling_k0_doubles_widths() {
        let a = ArchConfig::micro(3, 7, 24);
        let b = a.clone().with_k0(8);
        assert_eq!(b.stem_channels(), 2 * a.stem_channels());
        for (x, y) in a.growth_rates.iter().zip(&b.growth_rates) {
            assert_eq!(*y, 2 * x);
        }
    }

    #[test]
    fn default_config_builds_and_audits() {
        let cfg = ArchConfig::base(16, 20);
        let mut store = ParamStore::<f32>::new();
        let net = EkgNet::build(&cfg, &mut store, 1).unwrap();
        assert_eq!(net.growth_rates(), &[8, 16, 32]);
        // stage 2 receives its transition, the stem (÷4) and stage 0 features (÷4)
        let l = net.links(2);
        assert_eq!(l.len(), 3);
        assert_eq!(
            l[1],
            Link {
                source: LinkSource::Stem,
                factor: 4,
                channels: 16
            }
        );
        assert_eq!(
            l[2],
            Link {
                source: LinkSource::StageFeatures(0),
                factor: 4,
                channels: 32
            }
        );
    }

    #[test]
    fn zeroed_dynamic_conv_appends_zero_features() {
        let mut cfg = ArchConfig::micro(3, 5, 6);
        cfg.stages = vec![1];
        cfg.growth_rates = vec![4];
        let mut store = ParamStore::<f64>::new();
        let net = EkgNet::build(&cfg, &mut store, 3).unwrap();
        let layer = &net.stage_layers(0)[0];
        store
            .get_mut(layer.dynamic.weight)
            .unwrap()
            .data_mut()
            .fill(0.0);
        let mut sess = Session::new(&mut store, true);
        let x = sess.input(Tensor::full(&[2, 8, 6, 5, 5], 0.5));
        let y = layer.forward(&mut sess, x).unwrap();
        let y = sess.value(y).unwrap();
        assert_eq!(y.shape(), &[2, 4, 6, 5, 5]);
        assert!(y.data().iter().all(|&v| v == 0.0));
        let bad = sess.input(Tensor::zeros(&[1, 7, 6, 5, 5]));
        assert!(layer.forward(&mut sess, bad).is_err());
    }

    #[test]
    fn forward_rejects_wrong_extents() {
        let cfg = ArchConfig::micro(3, 5, 6);
        let mut store = ParamStore::<f32>::new();
        let net = EkgNet::build(&cfg, &mut store, 3).unwrap();
        assert!(net
            .logits(&mut store, Tensor::zeros(&[1, 1, 6, 5, 7]), false)
            .is_err());
        let y = net
            .logits(&mut store, Tensor::zeros(&[2, 1, 6, 5, 5]), false)
            .unwrap();
        assert_eq!(y.shape(), &[2, 3]);
    }
}
