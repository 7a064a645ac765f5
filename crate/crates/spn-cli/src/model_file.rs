//! Trained-model serialization.
//!
//! The on-disk format is a little-endian binary record:
//!
//! ```text
//! magic   4 bytes  "SPNW"
//! version u32      1
//! arch    u32 len + utf8
//! options u32 len + utf8 JSON {activation, alpha?, normalization, head_pooling}
//! count   u64      number of tensors
//! tensor  u32 len + utf8 name, u64 ndim, ndim x u64 dims, f64 data
//! ```
//!
//! Tensors appear in the graph's canonical parameter order and the file must
//! end exactly after the last one. Loading rebuilds the architecture from
//! (arch, options) and re-validates every tensor name and shape against it,
//! so a file cannot be loaded into the wrong network.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use spn_core::models::{build_model, ArchName, HeadPooling, ModelOptions, Normalization};
use spn_core::nn::{ActivationKind, CompiledGraph, ParamSet};
use spn_core::{Error, Result, Tensor};

const MAGIC: &[u8; 4] = b"SPNW";
const VERSION: u32 = 1;

/// Everything needed to run a trained model: the architecture name, the
/// options that select the exact graph, and the parameter tensors.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub arch: ArchName,
    pub options: ModelOptions,
    pub params: ParamSet,
}

impl ModelState {
    pub fn compile(&self) -> Result<CompiledGraph> {
        build_model(self.arch, &self.options)?.compile()
    }
}

#[derive(Serialize, Deserialize)]
struct OptionsRepr {
    activation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
    normalization: String,
    head_pooling: String,
}

fn options_to_json(options: &ModelOptions) -> String {
    let (activation, alpha) = match options.activation {
        ActivationKind::Relu => ("relu", None),
        ActivationKind::LeakyRelu { alpha } => ("leaky_relu", Some(alpha)),
        ActivationKind::Elu { alpha } => ("elu", Some(alpha)),
    };
    serde_json::to_string(&OptionsRepr {
        activation: activation.to_string(),
        alpha,
        normalization: options.normalization.as_str().to_string(),
        head_pooling: options.head_pooling.as_str().to_string(),
    })
    .expect("plain struct serializes")
}

fn options_from_json(json: &str) -> Result<ModelOptions> {
    let repr: OptionsRepr = serde_json::from_str(json)
        .map_err(|e| Error::invalid("model_file", format!("bad options block: {e}")))?;
    let activation = match (repr.activation.as_str(), repr.alpha) {
        ("relu", _) => ActivationKind::Relu,
        ("leaky_relu", Some(alpha)) => ActivationKind::LeakyRelu { alpha },
        ("leaky_relu", None) => ActivationKind::leaky_relu_default(),
        ("elu", Some(alpha)) => ActivationKind::Elu { alpha },
        ("elu", None) => ActivationKind::elu_default(),
        (other, _) => {
            return Err(Error::invalid(
                "model_file",
                format!("unknown activation `{other}` in options block"),
            ))
        }
    };
    let normalization = Normalization::parse(&repr.normalization).ok_or_else(|| {
        Error::invalid(
            "model_file",
            format!("unknown normalization `{}` in options block", repr.normalization),
        )
    })?;
    let head_pooling = HeadPooling::parse(&repr.head_pooling).ok_or_else(|| {
        Error::invalid(
            "model_file",
            format!("unknown head pooling `{}` in options block", repr.head_pooling),
        )
    })?;
    Ok(ModelOptions {
        activation,
        normalization,
        head_pooling,
    })
}

pub fn save_model(state: &ModelState, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    write_str(&mut out, state.arch.as_str());
    write_str(&mut out, &options_to_json(&state.options));
    let entries = state.params.entries();
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for entry in entries {
        write_str(&mut out, &entry.name);
        let shape = entry.value.shape();
        out.extend_from_slice(&(shape.len() as u64).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in entry.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::invalid("model_file", "bad magic: not a model file"));
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::invalid(
            "model_file",
            format!("unsupported version {version} (expected {VERSION})"),
        ));
    }
    let arch_name = r.read_str("arch")?;
    let arch = ArchName::parse(&arch_name)
        .ok_or_else(|| Error::invalid("model_file", format!("unknown arch `{arch_name}`")))?;
    let options = options_from_json(&r.read_str("options")?)?;
    let count = r.read_u64("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count);
    for i in 0..count {
        let name = r.read_str("tensor name")?;
        let ndim = r.read_u64("tensor ndim")? as usize;
        if ndim == 0 || ndim > 8 {
            return Err(Error::invalid(
                "model_file",
                format!("tensor {i} `{name}`: implausible rank {ndim}"),
            ));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.read_u64("tensor dim")? as usize);
        }
        let len: usize = shape.iter().product();
        let raw = r.take(len * 8, "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::invalid(
            "model_file",
            format!("{} trailing bytes after last tensor", bytes.len() - r.pos),
        ));
    }
    let graph = build_model(arch, &options)?.compile()?;
    let params = ParamSet::from_entries(&graph, tensors)?;
    Ok(ModelState {
        arch,
        options,
        params,
    })
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::invalid(
                "model_file",
                format!("file truncated while reading {field}"),
            ));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn read_u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, field)?.try_into().expect("8 bytes"),
        ))
    }

    fn read_str(&mut self, field: &str) -> Result<String> {
        let len = u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")) as usize;
        let raw = self.take(len, field)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::invalid("model_file", format!("{field}: not valid utf8")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use spn_core::rng::{substream, tags};

    fn small_state() -> ModelState {
        let arch = ArchName::Tdspn;
        let options = ModelOptions::canonical(arch);
        let graph = build_model(arch, &options).unwrap().compile().unwrap();
        let params = ParamSet::init(&graph, &mut substream(42, &[tags::INIT]));
        ModelState {
            arch,
            options,
            params,
        }
    }

    fn temp(name: &str) -> std::path::PathBuf {
        std::env::temp_dir().join(format!("spn-model-{name}.spnw"))
    }

    #[test]
    fn roundtrip_is_bitwise_identical() {
        let state = small_state();
        let path = temp("roundtrip");
        save_model(&state, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded.arch, state.arch);
        assert_eq!(loaded.options.normalization, state.options.normalization);
        let a = state.params.entries();
        let b = loaded.params.entries();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.value.shape(), y.value.shape());
            for (u, v) in x.value.data().iter().zip(y.value.data()) {
                assert_eq!(u.to_bits(), v.to_bits());
            }
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let state = small_state();
        let path = temp("trunc-src");
        save_model(&state, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 9);
        let cut = temp("trunc");
        fs::write(&cut, bytes).unwrap();
        let err = load_model(&cut).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let state = small_state();
        let path = temp("trail-src");
        save_model(&state, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.extend_from_slice(&[0u8; 3]);
        let padded = temp("trail");
        fs::write(&padded, bytes).unwrap();
        let err = load_model(&padded).unwrap_err();
        assert!(err.to_string().contains("trailing"), "{err}");
    }

    #[test]
    fn bad_magic_and_version_are_rejected() {
        let state = small_state();
        let path = temp("magic-src");
        save_model(&state, &path).unwrap();
        let good = fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        let p = temp("magic");
        fs::write(&p, &bad).unwrap();
        assert!(load_model(&p).unwrap_err().to_string().contains("magic"));

        let mut bad = good;
        bad[4] = 99;
        let p = temp("version");
        fs::write(&p, &bad).unwrap();
        assert!(load_model(&p).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn tensors_from_another_architecture_are_rejected() {
        // A structurally valid file whose arch says tdspn but whose tensors
        // came from dspn must fail shape/name validation on load.
        let dspn_opts = ModelOptions::canonical(ArchName::Dspn);
        let graph = build_model(ArchName::Dspn, &dspn_opts)
            .unwrap()
            .compile()
            .unwrap();
        let params = ParamSet::init(&graph, &mut substream(7, &[tags::INIT]));
        let mismatched = ModelState {
            arch: ArchName::Tdspn,
            options: ModelOptions::canonical(ArchName::Tdspn),
            params,
        };
        let path = temp("crossarch");
        save_model(&mismatched, &path).unwrap();
        assert!(load_model(&path).is_err());
    }
}
