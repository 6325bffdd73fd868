//! Tensor container files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "UETTENS\0"
//! version  u32      1
//! manifest u32 length + UTF-8 JSON
//! count    u32
//! count x { name: u32 length + UTF-8, rank: u32, dims: rank x u64, data: numel x f64 }
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use uet_core::data::{DataConfig, Sample};
use uet_core::{Adapter, DetNet, Parametrized, PyramidSpec, Rng, Role, Tensor};

use crate::error::{HarnessError, Result};

pub const MAGIC: &[u8; 8] = b"UETTENS\0";
pub const VERSION: u32 = 1;

/// Named tensors plus a JSON manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub manifest: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| HarnessError::Config(format!("{v} does not fit the container")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> std::result::Result<usize, String> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| format!("dimension {v} too large"))
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| e.to_string())
    }
}

impl Container {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &serde_json::to_string(&self.manifest)?)?;
        put_u32(&mut out, self.tensors.len())?;
        for (name, t) in &self.tensors {
            put_str(&mut out, name)?;
            put_u32(&mut out, t.rank())?;
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err("not a tensor container".into());
        }
        let version = r.u32()?;
        if version != VERSION as usize {
            return Err(format!("unsupported container version {version}"));
        }
        let manifest: serde_json::Value = serde_json::from_str(&r.string()?).map_err(|e| e.to_string())?;
        let count = r.u32()?;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u64()).collect::<std::result::Result<Vec<_>, _>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or("shape overflow")?;
            let bytes = r.take(numel.checked_mul(8).ok_or("shape overflow")?)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| format!("tensor {name}: {e}"))?;
            tensors.push((name, t));
        }
        if r.pos != buf.len() {
            return Err(format!("{} trailing bytes", buf.len() - r.pos));
        }
        Ok(Container { manifest, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(HarnessError::io(path))?;
        f.write_all(&bytes).map_err(HarnessError::io(path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(HarnessError::io(path))?;
        Self::from_bytes(&buf).map_err(|reason| HarnessError::Format {
            path: path.to_path_buf(),
            reason,
        })
    }

    fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecManifest {
    pub scales: usize,
    pub channels: Option<usize>,
    pub input: [usize; 3],
    pub num_classes: usize,
}

impl From<PyramidSpec> for SpecManifest {
    fn from(s: PyramidSpec) -> Self {
        SpecManifest {
            scales: s.scales,
            channels: s.channels,
            input: s.input,
            num_classes: s.num_classes,
        }
    }
}

impl From<SpecManifest> for PyramidSpec {
    fn from(s: SpecManifest) -> Self {
        PyramidSpec {
            scales: s.scales,
            channels: s.channels,
            input: s.input,
            num_classes: s.num_classes,
        }
    }
}

/// Manifest entry of a network checkpoint.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetManifest {
    pub kind: String,
    pub role: String,
    pub spec: SpecManifest,
    pub width: usize,
    pub depth: usize,
    pub param_digest: String,
    /// Channel adapter stored alongside a distilled student.
    pub has_adapter: bool,
}

pub fn save_net(path: &Path, net: &DetNet, adapter: Option<&Adapter>) -> Result<()> {
    let manifest = NetManifest {
        kind: "detnet".into(),
        role: net.role.as_str().into(),
        spec: net.spec.into(),
        width: net.width,
        depth: net.depth,
        param_digest: net.digest(),
        has_adapter: adapter.is_some(),
    };
    let mut tensors: Vec<(String, Tensor)> = net
        .param_names()
        .into_iter()
        .zip(net.params())
        .map(|(n, t)| (n, t.clone().with_requires_grad(false)))
        .collect();
    if let Some(a) = adapter {
        tensors.extend(
            a.param_names()
                .into_iter()
                .zip(a.params())
                .map(|(n, t)| (n, t.clone().with_requires_grad(false))),
        );
    }
    Container {
        manifest: serde_json::to_value(&manifest)?,
        tensors,
    }
    .write(path)
}

fn load_params(c: &Container, path: &Path, names: Vec<String>, params: Vec<&mut Tensor>) -> Result<()> {
    for (name, p) in names.into_iter().zip(params) {
        let t = c.get(&name).ok_or_else(|| HarnessError::Format {
            path: path.to_path_buf(),
            reason: format!("missing tensor {name}"),
        })?;
        if t.shape() != p.shape() {
            return Err(HarnessError::Format {
                path: path.to_path_buf(),
                reason: format!("tensor {name} has shape {:?}, expected {:?}", t.shape(), p.shape()),
            });
        }
        p.data_mut().copy_from_slice(t.data());
    }
    Ok(())
}

/// Loads a network (frozen when saved as a teacher) and its adapter, if any.
pub fn load_net(path: &Path) -> Result<(DetNet, Option<Adapter>)> {
    let c = Container::read(path)?;
    let m: NetManifest = serde_json::from_value(c.manifest.clone()).map_err(|e| HarnessError::Format {
        path: path.to_path_buf(),
        reason: format!("manifest: {e}"),
    })?;
    if m.kind != "detnet" {
        return Err(HarnessError::Format {
            path: path.to_path_buf(),
            reason: format!("expected a detnet checkpoint, found {}", m.kind),
        });
    }
    let role = match m.role.as_str() {
        "teacher" => Role::Teacher,
        "student" => Role::Student,
        other => {
            return Err(HarnessError::Format {
                path: path.to_path_buf(),
                reason: format!("unknown role {other}"),
            })
        }
    };
    let mut net = DetNet::build(m.spec.into(), m.width, m.depth, role, &mut Rng::new(0))?;
    let names = net.param_names();
    load_params(&c, path, names, net.params_mut())?;
    let adapter = if m.has_adapter {
        let first = c.get("adapter0.weight").ok_or_else(|| HarnessError::Format {
            path: path.to_path_buf(),
            reason: "missing adapter".into(),
        })?;
        let (co, ci) = (first.shape()[0], first.shape()[1]);
        let mut a = Adapter::new(ci, co, m.spec.scales, &mut Rng::new(0));
        let names = a.param_names();
        load_params(&c, path, names, a.params_mut())?;
        Some(a)
    } else {
        None
    };
    if net.digest() != m.param_digest {
        return Err(HarnessError::Format {
            path: path.to_path_buf(),
            reason: "parameter digest does not match the manifest".into(),
        });
    }
    Ok((net, adapter))
}

/// Dataset dump: images and per-scale label maps as `f64` tensors.
pub fn save_dataset(path: &Path, cfg: &DataConfig, train: &[Sample], eval: &[Sample]) -> Result<()> {
    let manifest = serde_json::json!({
        "kind": "dataset",
        "n_samples": cfg.n_samples,
        "n_eval": cfg.n_eval,
        "label_noise_rate": cfg.label_noise_rate,
        "seed": cfg.seed,
        "train_digest": uet_core::data::digest(train),
        "eval_digest": uet_core::data::digest(eval),
    });
    let mut tensors = Vec::new();
    for s in train.iter().chain(eval) {
        tensors.push((format!("image{}", s.index), s.image.clone()));
        for (k, l) in s.labels.iter().enumerate() {
            let t = Tensor::new(&[l.len()], l.iter().map(|&c| c as f64).collect())?;
            tensors.push((format!("labels{}.s{k}", s.index), t));
        }
    }
    Container { manifest, tensors }.write(path)
}
