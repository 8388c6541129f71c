//! Weight layout and storage.
//!
//! `weight_descs` is the single source of truth for every weight's name,
//! shape and initializer, as a pure function of the configuration. The
//! supernet derives its maximal banks from the same descriptions, which is
//! what makes prefix-slice weight entanglement well defined.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::elem::Elem;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

use super::config::{block_dims, final_channels, GlvmConfig};

/// How a weight is filled at initialization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    UniformFan(usize),
    Zeros,
    Ones,
    /// The fixed state matrix: a[d][v] = -(v+1).
    Ladder { state: usize },
    /// Inverse softplus of a log-uniform step size in [1e-3, 1e-1].
    DtBias,
    /// Small uniform for the class token.
    Token,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightDesc {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub trainable: bool,
}

impl WeightDesc {
    fn new(name: String, shape: Vec<usize>, init: Init) -> Self {
        WeightDesc {
            name,
            shape,
            init,
            trainable: true,
        }
    }

    fn buffer(name: String, shape: Vec<usize>, init: Init) -> Self {
        WeightDesc {
            name,
            shape,
            init,
            trainable: false,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

fn push_conv(out: &mut Vec<WeightDesc>, prefix: &str, cout: usize, cin_g: usize, k: usize) {
    let fan = cin_g * k * k;
    out.push(WeightDesc::new(format!("{prefix}.conv.w"), vec![cout, cin_g, k, k], Init::UniformFan(fan)));
    out.push(WeightDesc::new(format!("{prefix}.conv.b"), vec![cout], Init::UniformFan(fan)));
}

fn push_bn(out: &mut Vec<WeightDesc>, prefix: &str, c: usize) {
    out.push(WeightDesc::new(format!("{prefix}.bn.g"), vec![c], Init::Ones));
    out.push(WeightDesc::new(format!("{prefix}.bn.b"), vec![c], Init::Zeros));
    out.push(WeightDesc::buffer(format!("{prefix}.bn.mean"), vec![c], Init::Zeros));
    out.push(WeightDesc::buffer(format!("{prefix}.bn.var"), vec![c], Init::Ones));
}

fn push_linear(out: &mut Vec<WeightDesc>, prefix: &str, din: usize, dout: usize) {
    out.push(WeightDesc::new(format!("{prefix}.w"), vec![din, dout], Init::UniformFan(din)));
    out.push(WeightDesc::new(format!("{prefix}.b"), vec![dout], Init::UniformFan(din)));
}

/// Every weight of the network described by `cfg`, in deterministic order.
pub fn weight_descs(cfg: &GlvmConfig) -> Result<Vec<WeightDesc>> {
    cfg.check_buildable()?;
    let mut out = Vec::new();
    let c = cfg.channels;
    let d = cfg.embed_dim;

    push_conv(&mut out, "stem", c, cfg.in_channels, 7);
    push_bn(&mut out, "stem", c);
    push_conv(&mut out, "patch", d, c, cfg.patch);
    out.push(WeightDesc::new("cls_token".into(), vec![d], Init::Token));

    for i in 0..cfg.depth {
        let (cin, cout, _stride) = block_dims(c, i, cfg.depth);
        let p = format!("block{i:02}");
        // CNN branch: two sub-blocks of three convolutions
        push_conv(&mut out, &format!("{p}.cnn.a1"), cin, cin, 1);
        push_bn(&mut out, &format!("{p}.cnn.a1"), cin);
        out.push(WeightDesc::new(format!("{p}.cnn.dwa.conv.w"), vec![cin, 1, 3, 3], Init::UniformFan(9)));
        out.push(WeightDesc::new(format!("{p}.cnn.dwa.conv.b"), vec![cin], Init::UniformFan(9)));
        push_bn(&mut out, &format!("{p}.cnn.dwa"), cin);
        push_conv(&mut out, &format!("{p}.cnn.b1"), cin, cin, 1);
        push_bn(&mut out, &format!("{p}.cnn.b1"), cin);
        push_conv(&mut out, &format!("{p}.cnn.b2"), cin, cin, 1);
        push_bn(&mut out, &format!("{p}.cnn.b2"), cin);
        out.push(WeightDesc::new(format!("{p}.cnn.dwc.conv.w"), vec![cin, 1, 3, 3], Init::UniformFan(9)));
        out.push(WeightDesc::new(format!("{p}.cnn.dwc.conv.b"), vec![cin], Init::UniformFan(9)));
        push_bn(&mut out, &format!("{p}.cnn.dwc"), cin);
        push_conv(&mut out, &format!("{p}.cnn.c"), cout, cin, 1);
        push_bn(&mut out, &format!("{p}.cnn.c"), cout);

        // feature interaction units
        push_conv(&mut out, &format!("{p}.fiu1"), d, cin, 1);
        out.push(WeightDesc::new(format!("{p}.fiu1.ln.g"), vec![d], Init::Ones));
        out.push(WeightDesc::new(format!("{p}.fiu1.ln.b"), vec![d], Init::Zeros));
        push_conv(&mut out, &format!("{p}.fiu2"), cin, d, 1);
        push_bn(&mut out, &format!("{p}.fiu2"), cin);

        // multi-head Mamba branch
        let ed = cfg.expanded_dim(i)?;
        let dh = cfg.head_dim(i)?;
        let v = cfg.locals[i].state;
        out.push(WeightDesc::new(format!("{p}.mh.rms.g"), vec![d], Init::Ones));
        push_linear(&mut out, &format!("{p}.mh.in_proj"), d, ed);
        for t in 0..cfg.block_heads(i) {
            let h = format!("{p}.mh.head{t}");
            push_linear(&mut out, &format!("{h}.conv"), dh, dh);
            out.push(WeightDesc::new(format!("{h}.w_b"), vec![dh, v], Init::UniformFan(dh)));
            out.push(WeightDesc::new(format!("{h}.w_c"), vec![dh, v], Init::UniformFan(dh)));
            out.push(WeightDesc::new(format!("{h}.w_dt"), vec![dh, dh], Init::UniformFan(dh)));
            out.push(WeightDesc::new(format!("{h}.b_dt"), vec![dh], Init::DtBias));
            out.push(WeightDesc::buffer(format!("{h}.a"), vec![dh, v], Init::Ladder { state: v }));
        }
        push_linear(&mut out, &format!("{p}.mh.out_proj"), ed, d);
    }

    push_linear(&mut out, "head_cnn", final_channels(c, cfg.depth), cfg.classes);
    push_linear(&mut out, "head_mamba", d, cfg.classes);
    Ok(out)
}

fn init_values<E: Elem>(desc: &WeightDesc, rng: &mut ChaCha8Rng) -> Vec<E> {
    let n = desc.numel();
    match desc.init {
        Init::UniformFan(fan) => {
            let k = 1.0 / (fan.max(1) as f64).sqrt();
            (0..n).map(|_| E::from_f64(rng.random_range(-k..k))).collect()
        }
        Init::Zeros => vec![E::ZERO; n],
        Init::Ones => vec![E::ONE; n],
        Init::Ladder { state } => {
            let mut data = Vec::with_capacity(n);
            for _ in 0..n / state {
                for v in 0..state {
                    data.push(E::from_f64(-((v + 1) as f64)));
                }
            }
            data
        }
        Init::DtBias => (0..n)
            .map(|_| {
                let u: f64 = rng.random();
                let dt = ((1e-3f64).ln() + u * ((1e-1f64).ln() - (1e-3f64).ln())).exp();
                E::from_f64((dt.exp() - 1.0).ln())
            })
            .collect(),
        Init::Token => (0..n).map(|_| E::from_f64(rng.random_range(-0.02..0.02))).collect(),
    }
}

/// The full weight set of one network, stored flat and addressed by name.
pub struct GlvmWeights<E: Elem> {
    pub cfg: GlvmConfig,
    descs: Vec<WeightDesc>,
    tensors: Vec<Tensor<E>>,
    index: HashMap<String, usize>,
}

impl<E: Elem> GlvmWeights<E> {
    /// Fresh random initialization; deterministic in (cfg, seed).
    pub fn init(cfg: GlvmConfig, seed: u64) -> Result<Self> {
        let descs = weight_descs(&cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = Vec::with_capacity(descs.len());
        let mut index = HashMap::with_capacity(descs.len());
        for (i, desc) in descs.iter().enumerate() {
            let data = init_values::<E>(desc, &mut rng);
            let t = if desc.trainable {
                Tensor::param(desc.shape.clone(), data)
            } else {
                Tensor::buffer(desc.shape.clone(), data)
            };
            tensors.push(t);
            index.insert(desc.name.clone(), i);
        }
        Ok(GlvmWeights {
            cfg,
            descs,
            tensors,
            index,
        })
    }

    /// Build from named buffers (checkpoint load, supernet slice). Every
    /// weight of the layout must be present with the exact shape.
    pub fn from_named(cfg: GlvmConfig, mut values: HashMap<String, Vec<E>>) -> Result<Self> {
        let descs = weight_descs(&cfg)?;
        let mut tensors = Vec::with_capacity(descs.len());
        let mut index = HashMap::with_capacity(descs.len());
        for (i, desc) in descs.iter().enumerate() {
            let data = values.remove(&desc.name).ok_or_else(|| {
                TensorError::param("glvm_weights", format!("missing weight {}", desc.name))
            })?;
            if data.len() != desc.numel() {
                return Err(TensorError::param(
                    "glvm_weights",
                    format!(
                        "weight {} has {} values, architecture expects shape {:?}",
                        desc.name,
                        data.len(),
                        desc.shape
                    ),
                ));
            }
            let t = if desc.trainable {
                Tensor::param(desc.shape.clone(), data)
            } else {
                Tensor::buffer(desc.shape.clone(), data)
            };
            tensors.push(t);
            index.insert(desc.name.clone(), i);
        }
        if let Some(extra) = values.keys().next() {
            return Err(TensorError::param(
                "glvm_weights",
                format!("unexpected weight {extra} not in the architecture"),
            ));
        }
        Ok(GlvmWeights {
            cfg,
            descs,
            tensors,
            index,
        })
    }

    pub fn idx(&self, name: &str) -> usize {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown weight path {name}"))
    }

    pub fn t(&self, name: &str) -> &Tensor<E> {
        &self.tensors[self.idx(name)]
    }

    pub fn tensor_at(&self, i: usize) -> &Tensor<E> {
        &self.tensors[i]
    }

    pub fn descs(&self) -> &[WeightDesc] {
        &self.descs
    }

    pub fn entries(&self) -> impl Iterator<Item = (&WeightDesc, &Tensor<E>)> {
        self.descs.iter().zip(self.tensors.iter())
    }

    /// Trainable entries in layout order (the optimizer's parameter list).
    pub fn params(&self) -> impl Iterator<Item = (&WeightDesc, &Tensor<E>)> {
        self.entries().filter(|(d, _)| d.trainable)
    }

    /// Total trainable parameter count; a pure function of the config.
    pub fn param_count(&self) -> u64 {
        self.params().map(|(d, _)| d.numel() as u64).sum()
    }

    pub fn snapshot(&self) -> Vec<(String, Vec<E>)> {
        self.entries()
            .map(|(d, t)| (d.name.clone(), t.to_vec()))
            .collect()
    }

    pub fn restore(&self, snapshot: &[(String, Vec<E>)]) {
        for (name, data) in snapshot {
            let t = self.t(name);
            t.set_data(data.clone());
        }
    }

    pub fn zero_grads(&self) {
        for t in &self.tensors {
            t.zero_grad();
        }
    }
}

/// Parameter count for a config without building the tensors.
pub fn param_count(cfg: &GlvmConfig) -> Result<u64> {
    Ok(weight_descs(cfg)?
        .iter()
        .filter(|d| d.trainable)
        .map(|d| d.numel() as u64)
        .sum())
}
