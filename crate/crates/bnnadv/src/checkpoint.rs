//! Model checkpoints.
//!
//! A checkpoint is one file: a text manifest of `key = value` lines, a
//! `---` separator line, then every blob named in the manifest as
//! little-endian `f64`s, in manifest order. Loading is bit-exact.
//!
//! ```text
//! bnnadv-checkpoint
//! format_version = 1
//! family = bbb
//! input_shape = 784
//! layers = dense:784:1200 relu dense:1200:1200 relu dense:1200:10 softmax
//! seed = 7
//! hyper.epochs = 5
//! blob.mean = 2395210
//! blob.rho = 2395210
//! ---
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use bnnadv_core::bnn::{Family, GaussianWeightPosterior, Model, PbpLayer, PbpPosterior};
use bnnadv_core::nn::{LayerSpec, Network};
use sha2::{Digest, Sha256};

use crate::error::{io_err, Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "bnnadv-checkpoint";
const SEPARATOR: &str = "---";

pub fn format_layer(layer: &LayerSpec) -> String {
    match *layer {
        LayerSpec::Dense { fan_in, fan_out } => format!("dense:{fan_in}:{fan_out}"),
        LayerSpec::Dropout { rate } => format!("dropout:{rate}"),
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
        } => format!("conv2d:{in_channels}:{out_channels}:{kernel_h}:{kernel_w}"),
        other => other.kind().to_string(),
    }
}

pub fn format_layers(layers: &[LayerSpec]) -> String {
    layers.iter().map(format_layer).collect::<Vec<_>>().join(" ")
}

pub fn parse_layer(text: &str) -> Result<LayerSpec> {
    let parts: Vec<&str> = text.split(':').collect();
    let bad = || Error::Config(format!("malformed layer `{text}`"));
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
    Ok(match parts[..] {
        ["dense", a, b] => LayerSpec::Dense {
            fan_in: num(a)?,
            fan_out: num(b)?,
        },
        ["conv2d", a, b, c, d] => LayerSpec::Conv2d {
            in_channels: num(a)?,
            out_channels: num(b)?,
            kernel_h: num(c)?,
            kernel_w: num(d)?,
        },
        ["dropout", r] => LayerSpec::Dropout {
            rate: r.parse().map_err(|_| bad())?,
        },
        ["relu"] => LayerSpec::Relu,
        ["softmax"] => LayerSpec::Softmax,
        ["maxpool2d"] => LayerSpec::MaxPool2d,
        ["flatten"] => LayerSpec::Flatten,
        _ => return Err(bad()),
    })
}

pub fn parse_layers(text: &str) -> Result<Vec<LayerSpec>> {
    text.split_whitespace().map(parse_layer).collect()
}

/// Training provenance stored next to the parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelMeta {
    pub seed: u64,
    /// Hyperparameters as written by the trainer (`epochs`, `lr`, ...).
    pub hyper: BTreeMap<String, String>,
}

fn shape_and_layers(model: &Model) -> (Vec<usize>, Vec<LayerSpec>) {
    match model {
        Model::Deterministic(net) | Model::McDropout(net) => (net.input_shape().to_vec(), net.layers().to_vec()),
        Model::Bbb(post) => {
            let net = post.mean_network();
            (net.input_shape().to_vec(), net.layers().to_vec())
        }
        Model::Pbp(post) => (vec![post.input_dim()], post.layer_specs()),
    }
}

fn blobs(model: &Model) -> Vec<(&'static str, Vec<f64>)> {
    match model {
        Model::Deterministic(net) | Model::McDropout(net) => vec![("params", net.params().to_vec())],
        Model::Bbb(post) => vec![("mean", post.mean().to_vec()), ("rho", post.rho().to_vec())],
        Model::Pbp(post) => vec![
            (
                "mean",
                post.layers().iter().flat_map(|l| l.mean().iter().copied()).collect(),
            ),
            (
                "var",
                post.layers().iter().flat_map(|l| l.var().iter().copied()).collect(),
            ),
        ],
    }
}

/// Serialises a model and its provenance.
pub fn encode(model: &Model, meta: &ModelMeta) -> Vec<u8> {
    let (shape, layers) = shape_and_layers(model);
    let blobs = blobs(model);
    let mut text = String::new();
    text.push_str(MAGIC);
    text.push('\n');
    text.push_str(&format!("format_version = {FORMAT_VERSION}\n"));
    text.push_str(&format!("family = {}\n", model.family().name()));
    let shape: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    text.push_str(&format!("input_shape = {}\n", shape.join(" ")));
    text.push_str(&format!("layers = {}\n", format_layers(&layers)));
    text.push_str(&format!("seed = {}\n", meta.seed));
    for (k, v) in &meta.hyper {
        text.push_str(&format!("hyper.{k} = {v}\n"));
    }
    for (name, data) in &blobs {
        text.push_str(&format!("blob.{name} = {}\n", data.len()));
    }
    text.push_str(SEPARATOR);
    text.push('\n');
    let mut out = text.into_bytes();
    for (_, data) in &blobs {
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save(path: impl AsRef<Path>, model: &Model, meta: &ModelMeta) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    // Write then rename so an interrupted save never leaves a torn checkpoint.
    let tmp = path.with_extension("ckpt.partial");
    fs::write(&tmp, encode(model, meta)).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// A loaded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: ModelMeta,
    /// Hex SHA-256 of the checkpoint bytes.
    pub sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let parse_err = |line: usize, detail: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        detail,
    };
    let mut entries: Vec<(usize, String, String)> = Vec::new();
    let mut pos = 0;
    let mut line_no = 0;
    let mut ended = false;
    while pos < bytes.len() {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|i| pos + i)
            .unwrap_or(bytes.len());
        line_no += 1;
        let line =
            std::str::from_utf8(&bytes[pos..end]).map_err(|_| parse_err(line_no, "manifest is not UTF-8".into()))?;
        pos = end + 1;
        if line_no == 1 {
            if line != MAGIC {
                return Err(parse_err(1, format!("not a checkpoint (expected `{MAGIC}`)")));
            }
            continue;
        }
        if line == SEPARATOR {
            ended = true;
            break;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| parse_err(line_no, format!("expected `key = value`, got `{line}`")))?;
        entries.push((line_no, k.trim().to_string(), v.trim().to_string()));
    }
    if !ended {
        return Err(parse_err(line_no, "manifest has no `---` terminator".into()));
    }
    let get = |key: &str| -> Result<(usize, &str)> {
        entries
            .iter()
            .find(|(_, k, _)| k == key)
            .map(|(l, _, v)| (*l, v.as_str()))
            .ok_or_else(|| parse_err(line_no, format!("missing key `{key}`")))
    };
    let (l, version) = get("format_version")?;
    if version.parse::<u32>().ok() != Some(FORMAT_VERSION) {
        return Err(parse_err(l, format!("unsupported format version {version}")));
    }
    let (l, family) = get("family")?;
    let family: Family = family.parse().map_err(|e| parse_err(l, format!("{e}")))?;
    let (l, shape) = get("input_shape")?;
    let shape = shape
        .split_whitespace()
        .map(|d| d.parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| parse_err(l, format!("bad input shape `{shape}`")))?;
    let (l, layers) = get("layers")?;
    let layers = parse_layers(layers).map_err(|e| parse_err(l, e.to_string()))?;
    let (l, seed) = get("seed")?;
    let seed = seed.parse().map_err(|_| parse_err(l, format!("bad seed `{seed}`")))?;
    let hyper = entries
        .iter()
        .filter_map(|(_, k, v)| k.strip_prefix("hyper.").map(|k| (k.to_string(), v.clone())))
        .collect();

    let mut blobs: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (l, k, v) in &entries {
        let Some(name) = k.strip_prefix("blob.") else { continue };
        let count: usize = v.parse().map_err(|_| parse_err(*l, format!("bad blob length `{v}`")))?;
        let len = count * 8;
        if bytes.len() < pos + len {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: bytes.len() as u64,
                detail: format!("blob `{name}` needs {len} bytes from offset {pos}"),
            });
        }
        let data = bytes[pos..pos + len]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        blobs.insert(name.to_string(), data);
        pos += len;
    }
    if pos != bytes.len() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: pos as u64,
            detail: "trailing bytes after the last blob".into(),
        });
    }
    let mut take = |name: &str| {
        blobs
            .remove(name)
            .ok_or_else(|| parse_err(line_no, format!("missing blob `{name}` for family {family}")))
    };
    let model = match family {
        Family::Deterministic | Family::McDropout => {
            let mut net = Network::new(shape, layers)?;
            net.set_params(take("params")?)?;
            if family == Family::Deterministic {
                Model::Deterministic(net)
            } else {
                Model::McDropout(net)
            }
        }
        Family::Bbb => {
            let mut net = Network::new(shape, layers)?;
            net.set_params(take("mean")?)?;
            Model::Bbb(GaussianWeightPosterior::new(net, take("rho")?)?)
        }
        Family::Pbp => {
            let sizes = PbpPosterior::sizes_from_specs(&layers)?;
            let (mean, var) = (take("mean")?, take("var")?);
            let mut offset = 0;
            let mut pl = Vec::new();
            for w in sizes.windows(2) {
                let n = w[1] * (w[0] + 1);
                if offset + n > mean.len() || mean.len() != var.len() {
                    return Err(parse_err(line_no, "PBP blobs do not match the layer sizes".into()));
                }
                pl.push(PbpLayer::new(
                    w[0],
                    w[1],
                    mean[offset..offset + n].to_vec(),
                    var[offset..offset + n].to_vec(),
                )?);
                offset += n;
            }
            if offset != mean.len() {
                return Err(parse_err(line_no, "PBP blobs do not match the layer sizes".into()));
            }
            Model::Pbp(PbpPosterior::new(pl)?)
        }
    };
    Ok(Checkpoint {
        model,
        meta: ModelMeta { seed, hyper },
        sha256: sha256_hex(bytes),
    })
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode(&bytes, path)
}
