//! Binary artifact files: model checkpoints and fitted Fisher factors.
//!
//! Both start with an 8-byte magic and a little-endian `u32` version. All
//! integers and floats that follow are little-endian.
//!
//! Checkpoint (`RVAE0001`):
//!
//! ```text
//! magic[8] version:u32 fingerprint:u64 descriptor_len:u32 descriptor[..]
//! weights_checksum:u64 param_count:u64 params:f32[param_count]
//! ```
//!
//! Fisher file (`RFSH0001`):
//!
//! ```text
//! magic[8] version:u32 fingerprint:u64 weights_checksum:u64 method:u8 layers:u32
//! per layer: name_len:u32 name[..] q:u32 p:u32 n_samples:u64 damping:f64
//!            diag: f64[q·p] | U_A: f64[p·p] U_B: f64[q·q] Σ: f64[q·p]
//! has_stats:u8 [n_samples:u64 (mu:f64 sigma:f64)[layers]]
//! ```

use std::fs;
use std::io::{self, Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use crate::autodiff::{Activation, ConvSpec, LayerSpec, Network};
use crate::digest64;
use crate::fisher::{DiagFactor, EkfacFactor, FisherArtifact, FisherMethod, LayerFactor};
use crate::rose::LayerStats;
use crate::tensor::{Scalar, Tensor};
use crate::vae::{standard_layers, EncoderPart, LayerRef, VaeConfig, VaeModel};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RVAE0001";
pub const FISHER_MAGIC: &[u8; 8] = b"RFSH0001";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("file truncated while reading {0}")]
    Truncated(&'static str),
    #[error("stored fingerprint {stored:016x} does not match recomputed {computed:016x}")]
    Fingerprint { stored: u64, computed: u64 },
    #[error("stored weights checksum {stored:016x} does not match recomputed {computed:016x}")]
    Checksum { stored: u64, computed: u64 },
    #[error("invalid contents: {0}")]
    Invalid(String),
}

pub type Result<T, E = FormatError> = std::result::Result<T, E>;

fn truncated(what: &'static str) -> impl Fn(io::Error) -> FormatError {
    move |e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            FormatError::Truncated(what)
        } else {
            FormatError::Io(e)
        }
    }
}

fn check_header(r: &mut impl Read, magic: &[u8; 8]) -> Result<()> {
    let mut found = [0u8; 8];
    let mut got = 0;
    while got < 8 {
        match r.read(&mut found[got..])? {
            0 => break,
            n => got += n,
        }
    }
    if &found[..got] != magic {
        return Err(FormatError::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(&found[..got]).into_owned(),
        });
    }
    let version = r.read_u32::<LE>().map_err(truncated("version"))?;
    if version != FORMAT_VERSION {
        return Err(FormatError::Version(version));
    }
    Ok(())
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.write_u32::<LE>(u32::try_from(v).expect("dimension fits in u32")).unwrap();
}

fn encode_network(out: &mut Vec<u8>, input: &[usize], layers: &[LayerSpec]) {
    put_u32(out, input.len());
    for &d in input {
        put_u32(out, d);
    }
    put_u32(out, layers.len());
    for l in layers {
        match l {
            LayerSpec::Dense { inputs, outputs, bias } => {
                out.push(0);
                put_u32(out, *inputs);
                put_u32(out, *outputs);
                out.push(u8::from(*bias));
            }
            LayerSpec::Conv2d(c) => {
                out.push(1);
                for v in [c.in_channels, c.out_channels, c.kernel, c.stride, c.padding, c.in_hw.0, c.in_hw.1] {
                    put_u32(out, v);
                }
                out.push(u8::from(c.bias));
            }
            LayerSpec::Activation(Activation::Relu) => out.push(2),
            LayerSpec::Reshape { shape } => {
                out.push(3);
                put_u32(out, shape.len());
                for &d in shape {
                    put_u32(out, d);
                }
            }
            LayerSpec::Upsample { factor } => {
                out.push(4);
                put_u32(out, *factor);
            }
        }
    }
}

fn get_u32(r: &mut impl Read) -> Result<usize> {
    Ok(r.read_u32::<LE>().map_err(truncated("descriptor"))? as usize)
}

fn get_u8(r: &mut impl Read) -> Result<u8> {
    r.read_u8().map_err(truncated("descriptor"))
}

fn decode_network(r: &mut impl Read) -> Result<(Vec<usize>, Vec<LayerSpec>)> {
    let rank = get_u32(r)?;
    let input = (0..rank).map(|_| get_u32(r)).collect::<Result<Vec<_>>>()?;
    let count = get_u32(r)?;
    let mut layers = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let layer = match get_u8(r)? {
            0 => {
                let (inputs, outputs) = (get_u32(r)?, get_u32(r)?);
                LayerSpec::Dense { inputs, outputs, bias: get_u8(r)? != 0 }
            }
            1 => {
                let v = (0..7).map(|_| get_u32(r)).collect::<Result<Vec<_>>>()?;
                let bias = get_u8(r)? != 0;
                LayerSpec::Conv2d(ConvSpec::new(v[0], v[1], v[2], v[3], v[4], (v[5], v[6]), bias))
            }
            2 => LayerSpec::Activation(Activation::Relu),
            3 => {
                let n = get_u32(r)?;
                LayerSpec::Reshape { shape: (0..n).map(|_| get_u32(r)).collect::<Result<Vec<_>>>()? }
            }
            4 => LayerSpec::Upsample { factor: get_u32(r)? },
            tag => return Err(FormatError::Invalid(format!("unknown layer tag {tag}"))),
        };
        layers.push(layer);
    }
    Ok((input, layers))
}

/// Architecture descriptor bytes: the four layer chains, latent size,
/// selected layers and, for the standard architecture, its configuration.
pub fn descriptor<T: Scalar>(model: &VaeModel<T>) -> Vec<u8> {
    let mut out = Vec::new();
    for net in model.networks() {
        encode_network(&mut out, net.input_shape(), net.layers());
    }
    put_u32(&mut out, model.latent_dim());
    put_u32(&mut out, model.selected_layers().len());
    for r in model.selected_layers() {
        out.push(match r.part {
            EncoderPart::Trunk => 0,
            EncoderPart::Mean => 1,
            EncoderPart::LogVar => 2,
        });
        put_u32(&mut out, r.index);
    }
    match model.config() {
        None => out.push(0),
        Some(c) => {
            out.push(1);
            for v in [c.in_channels, c.height, c.width, c.channels, c.latent_dim] {
                put_u32(&mut out, v);
            }
        }
    }
    out
}

/// Hash of the architecture descriptor; independent of the weights.
pub fn model_fingerprint<T: Scalar>(model: &VaeModel<T>) -> u64 {
    digest64(&descriptor(model))
}

fn param_blob<T: Scalar>(model: &VaeModel<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 * model.num_params());
    for net in model.networks() {
        for s in net.param_slices() {
            for &v in s {
                out.write_f32::<LE>(v.as_f64() as f32).unwrap();
            }
        }
    }
    out
}

/// Hash of the parameters rounded to `f32`, as stored in checkpoints.
pub fn weights_checksum<T: Scalar>(model: &VaeModel<T>) -> u64 {
    digest64(&param_blob(model))
}

pub fn encode_checkpoint<T: Scalar>(model: &VaeModel<T>) -> Vec<u8> {
    let desc = descriptor(model);
    let blob = param_blob(model);
    let mut out = Vec::with_capacity(desc.len() + blob.len() + 48);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.write_u32::<LE>(FORMAT_VERSION).unwrap();
    out.write_u64::<LE>(digest64(&desc)).unwrap();
    put_u32(&mut out, desc.len());
    out.extend_from_slice(&desc);
    out.write_u64::<LE>(digest64(&blob)).unwrap();
    out.write_u64::<LE>(model.num_params() as u64).unwrap();
    out.extend_from_slice(&blob);
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<VaeModel<f32>> {
    let mut r = Cursor::new(bytes);
    check_header(&mut r, CHECKPOINT_MAGIC)?;
    let stored_fp = r.read_u64::<LE>().map_err(truncated("fingerprint"))?;
    let len = r.read_u32::<LE>().map_err(truncated("descriptor length"))? as usize;
    let start = r.position() as usize;
    let desc = bytes.get(start..start + len).ok_or(FormatError::Truncated("descriptor"))?;
    let computed = digest64(desc);
    if computed != stored_fp {
        return Err(FormatError::Fingerprint { stored: stored_fp, computed });
    }
    r.set_position((start + len) as u64);
    let stored_sum = r.read_u64::<LE>().map_err(truncated("weights checksum"))?;
    let count = r.read_u64::<LE>().map_err(truncated("parameter count"))? as usize;
    let at = r.position() as usize;
    let blob = bytes.get(at..).unwrap_or(&[]);
    if blob.len() < 4 * count {
        return Err(FormatError::Truncated("parameters"));
    }
    if blob.len() > 4 * count {
        return Err(FormatError::Invalid(format!("{} trailing bytes", blob.len() - 4 * count)));
    }
    let computed = digest64(blob);
    if computed != stored_sum {
        return Err(FormatError::Checksum { stored: stored_sum, computed });
    }

    let mut model = model_from_descriptor(desc)?;
    if model.num_params() != count {
        return Err(FormatError::Invalid(format!(
            "descriptor implies {} parameters, file holds {count}",
            model.num_params()
        )));
    }
    let mut br = Cursor::new(blob);
    for net in model.networks_mut() {
        for s in net.param_slices_mut() {
            br.read_f32_into::<LE>(s).map_err(truncated("parameters"))?;
        }
    }
    if let Some(i) = model.networks().iter().flat_map(|n| n.param_slices()).flatten().position(|v| !v.is_finite()) {
        return Err(FormatError::Invalid(format!("parameter {i} is not finite")));
    }
    Ok(model)
}

fn model_from_descriptor(desc: &[u8]) -> Result<VaeModel<f32>> {
    let mut r = Cursor::new(desc);
    let mut nets = Vec::with_capacity(4);
    for _ in 0..4 {
        let (input, layers) = decode_network(&mut r)?;
        nets.push(Network::<f32>::new(input.clone(), layers.clone()).map_err(|e| FormatError::Invalid(e.to_string()))?);
    }
    let latent = get_u32(&mut r)?;
    let n_sel = get_u32(&mut r)?;
    let mut selected = Vec::with_capacity(n_sel.min(1024));
    for _ in 0..n_sel {
        let part = match get_u8(&mut r)? {
            0 => EncoderPart::Trunk,
            1 => EncoderPart::Mean,
            2 => EncoderPart::LogVar,
            t => return Err(FormatError::Invalid(format!("unknown encoder part {t}"))),
        };
        selected.push(LayerRef { part, index: get_u32(&mut r)? });
    }
    let config = match get_u8(&mut r)? {
        0 => None,
        1 => {
            let v = (0..5).map(|_| get_u32(&mut r)).collect::<Result<Vec<_>>>()?;
            Some(VaeConfig { in_channels: v[0], height: v[1], width: v[2], channels: v[3], latent_dim: v[4] })
        }
        t => return Err(FormatError::Invalid(format!("unknown config flag {t}"))),
    };
    if (r.position() as usize) != desc.len() {
        return Err(FormatError::Invalid("trailing descriptor bytes".into()));
    }
    let decoder = nets.pop().unwrap();
    let logvar = nets.pop().unwrap();
    let mean = nets.pop().unwrap();
    let trunk = nets.pop().unwrap();
    let mut model = VaeModel::from_networks(trunk, mean, logvar, decoder, Some(selected))
        .map_err(|e| FormatError::Invalid(e.to_string()))?;
    if model.latent_dim() != latent {
        return Err(FormatError::Invalid(format!("latent size {latent} disagrees with the layer chains")));
    }
    if let Some(cfg) = config {
        let expected = standard_layers(&cfg).map_err(|e| FormatError::Invalid(e.to_string()))?;
        let matches = model.networks().iter().zip(&expected).all(|(n, (input, layers))| {
            n.input_shape() == input.as_slice() && n.layers() == layers.as_slice()
        });
        if !matches {
            return Err(FormatError::Invalid("layer chains do not match the recorded configuration".into()));
        }
        model.set_config(cfg);
    }
    Ok(model)
}

pub fn save_checkpoint<T: Scalar>(model: &VaeModel<T>, path: &Path) -> Result<()> {
    Ok(fs::write(path, encode_checkpoint(model))?)
}

pub fn load_checkpoint(path: &Path) -> Result<VaeModel<f32>> {
    decode_checkpoint(&fs::read(path)?)
}

fn put_f64s(out: &mut Vec<u8>, t: &Tensor<f64>) {
    for &v in t.data() {
        out.write_f64::<LE>(v).unwrap();
    }
}

fn get_f64s(r: &mut impl Read, shape: Vec<usize>) -> Result<Tensor<f64>> {
    let mut data = vec![0.0; shape.iter().product()];
    r.read_f64_into::<LE>(&mut data).map_err(truncated("factor payload"))?;
    Tensor::new(shape, data).map_err(|e| FormatError::Invalid(e.to_string()))
}

pub fn encode_fisher(artifact: &FisherArtifact) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(FISHER_MAGIC);
    out.write_u32::<LE>(FORMAT_VERSION).unwrap();
    out.write_u64::<LE>(artifact.model_fingerprint).unwrap();
    out.write_u64::<LE>(artifact.weights_checksum).unwrap();
    out.push(match artifact.method {
        FisherMethod::Diag => 0,
        FisherMethod::Ekfac => 1,
    });
    put_u32(&mut out, artifact.layers.len());
    for (i, f) in artifact.layers.iter().enumerate() {
        let name = artifact.layer_names.get(i).map_or("", String::as_str);
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        let (q, p) = f.shape();
        put_u32(&mut out, q);
        put_u32(&mut out, p);
        out.write_u64::<LE>(f.n_samples() as u64).unwrap();
        out.write_f64::<LE>(f.damping()).unwrap();
        match f {
            LayerFactor::Diag(d) => put_f64s(&mut out, &d.diag),
            LayerFactor::Ekfac(e) => {
                put_f64s(&mut out, &e.u_a);
                put_f64s(&mut out, &e.u_b);
                put_f64s(&mut out, &e.sigma);
            }
        }
    }
    match &artifact.stats {
        None => out.push(0),
        Some(s) => {
            out.push(1);
            out.write_u64::<LE>(s.n_samples as u64).unwrap();
            for (m, sd) in s.mu.iter().zip(&s.sigma) {
                out.write_f64::<LE>(*m).unwrap();
                out.write_f64::<LE>(*sd).unwrap();
            }
        }
    }
    out
}

pub fn decode_fisher(bytes: &[u8]) -> Result<FisherArtifact> {
    let mut r = Cursor::new(bytes);
    check_header(&mut r, FISHER_MAGIC)?;
    let model_fingerprint = r.read_u64::<LE>().map_err(truncated("fingerprint"))?;
    let weights_checksum = r.read_u64::<LE>().map_err(truncated("weights checksum"))?;
    let method = match r.read_u8().map_err(truncated("method"))? {
        0 => FisherMethod::Diag,
        1 => FisherMethod::Ekfac,
        t => return Err(FormatError::Invalid(format!("unknown method tag {t}"))),
    };
    let n_layers = r.read_u32::<LE>().map_err(truncated("layer count"))? as usize;
    let mut layers = Vec::with_capacity(n_layers.min(1024));
    let mut layer_names = Vec::with_capacity(n_layers.min(1024));
    for _ in 0..n_layers {
        let len = r.read_u32::<LE>().map_err(truncated("layer name"))? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(truncated("layer name"))?;
        layer_names.push(String::from_utf8(name).map_err(|e| FormatError::Invalid(e.to_string()))?);
        let q = r.read_u32::<LE>().map_err(truncated("layer shape"))? as usize;
        let p = r.read_u32::<LE>().map_err(truncated("layer shape"))? as usize;
        let n_samples = r.read_u64::<LE>().map_err(truncated("sample count"))? as usize;
        let damping = r.read_f64::<LE>().map_err(truncated("damping"))?;
        let remaining = bytes.len() as u64 - r.position().min(bytes.len() as u64);
        let needed = 8 * match method {
            FisherMethod::Diag => q * p,
            FisherMethod::Ekfac => q * p + p * p + q * q,
        } as u64;
        if needed > remaining {
            return Err(FormatError::Truncated("factor payload"));
        }
        layers.push(match method {
            FisherMethod::Diag => LayerFactor::Diag(DiagFactor { diag: get_f64s(&mut r, vec![q, p])?, n_samples, damping }),
            FisherMethod::Ekfac => LayerFactor::Ekfac(EkfacFactor {
                u_a: get_f64s(&mut r, vec![p, p])?,
                u_b: get_f64s(&mut r, vec![q, q])?,
                sigma: get_f64s(&mut r, vec![q, p])?,
                n_samples,
                damping,
            }),
        });
    }
    let stats = match r.read_u8().map_err(truncated("statistics flag"))? {
        0 => None,
        1 => {
            let n_samples = r.read_u64::<LE>().map_err(truncated("statistics"))? as usize;
            let mut mu = Vec::with_capacity(n_layers);
            let mut sigma = Vec::with_capacity(n_layers);
            for _ in 0..n_layers {
                mu.push(r.read_f64::<LE>().map_err(truncated("statistics"))?);
                sigma.push(r.read_f64::<LE>().map_err(truncated("statistics"))?);
            }
            Some(LayerStats { mu, sigma, n_samples })
        }
        t => return Err(FormatError::Invalid(format!("unknown statistics flag {t}"))),
    };
    if (r.position() as usize) != bytes.len() {
        return Err(FormatError::Invalid("trailing bytes".into()));
    }
    Ok(FisherArtifact { method, layer_names, layers, model_fingerprint, weights_checksum, stats })
}

pub fn save_fisher(artifact: &FisherArtifact, path: &Path) -> Result<()> {
    Ok(fs::write(path, encode_fisher(artifact))?)
}

pub fn load_fisher(path: &Path) -> Result<FisherArtifact> {
    decode_fisher(&fs::read(path)?)
}
