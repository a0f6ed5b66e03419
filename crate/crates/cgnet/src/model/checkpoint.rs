//! Bit-exact checkpoint files.
//!
//! Layout: magic `CGN1`, u32 version, u32 record count, then per record a
//! u16 name length, the UTF-8 name, a u8 dtype tag (0 = f32, 1 = f64), a u8
//! rank, rank u32 extents and the little-endian payload. A trailing u64
//! FNV-1a hash covers every preceding byte. All integers little-endian.
//!
//! Besides the parameter store the file carries the optimizer moments
//! (`opt.m.*` / `opt.v.*`), the iteration counter and normalization means
//! (`__train.*`), and the network configuration (`__cfg.*`) as reserved-name
//! scalar records, so evaluation and inference can rebuild the model from
//! the file alone.

use crate::element::{Dtype, Element};
use crate::error::{Error, Result};
use crate::model::config::{ActKind, NetworkConfig, Residual, SurMode};
use crate::model::network::Network;
use crate::model::params::{ParamKind, ParamStore};
use crate::rng::Pcg32;
use crate::tensor::Tensor;
use std::io::Write;
use std::path::Path;

const MAGIC: &[u8; 4] = b"CGN1";
const VERSION: u32 = 1;

/// Training progress stored alongside the weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainState {
    /// Completed optimizer steps.
    pub iter: u64,
    /// Per-channel normalization means the model was trained with.
    pub means: [f64; 3],
}

impl Default for TrainState {
    fn default() -> Self {
        TrainState {
            iter: 0,
            means: [0.0; 3],
        }
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn write_record<E: Element>(buf: &mut Vec<u8>, name: &str, t: &Tensor<E>) {
    let name_bytes = name.as_bytes();
    assert!(name_bytes.len() <= u16::MAX as usize);
    buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
    buf.extend_from_slice(name_bytes);
    buf.push(E::DTYPE.tag());
    buf.push(t.rank() as u8);
    for &d in t.dims() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(buf);
    }
}

fn scalar<E: Element>(v: f64) -> Tensor<E> {
    Tensor::from_vec(&[1], vec![E::from_f64(v)]).expect("scalar")
}

fn config_records<E: Element>(cfg: &NetworkConfig) -> Vec<(String, Tensor<E>)> {
    let enc_res = |r: Residual| match r {
        Residual::None => 0.0,
        Residual::Local => 1.0,
        Residual::Global => 2.0,
    };
    let enc_sur = |s: SurMode| match s {
        SurMode::None => 0.0,
        SurMode::Single => 1.0,
        SurMode::Full => 2.0,
    };
    let enc_act = |a: ActKind| match a {
        ActKind::Relu => 0.0,
        ActKind::Prelu => 1.0,
    };
    vec![
        ("__cfg.classes".into(), scalar(cfg.num_classes as f64)),
        ("__cfg.m".into(), scalar(cfg.blocks_stage2 as f64)),
        ("__cfg.n".into(), scalar(cfg.blocks_stage3 as f64)),
        ("__cfg.c1".into(), scalar(cfg.stage_channels[0] as f64)),
        ("__cfg.c2".into(), scalar(cfg.stage_channels[1] as f64)),
        ("__cfg.c3".into(), scalar(cfg.stage_channels[2] as f64)),
        ("__cfg.d2".into(), scalar(cfg.dilations[0] as f64)),
        ("__cfg.d3".into(), scalar(cfg.dilations[1] as f64)),
        (
            "__cfg.injection".into(),
            scalar(if cfg.input_injection { 1.0 } else { 0.0 }),
        ),
        ("__cfg.sur_mode".into(), scalar(enc_sur(cfg.sur_mode))),
        (
            "__cfg.use_glo".into(),
            scalar(if cfg.use_glo { 1.0 } else { 0.0 }),
        ),
        ("__cfg.glo_reduction".into(), scalar(cfg.glo_reduction as f64)),
        ("__cfg.residual".into(), scalar(enc_res(cfg.residual))),
        ("__cfg.activation".into(), scalar(enc_act(cfg.activation))),
        (
            "__cfg.interchannel".into(),
            scalar(if cfg.interchannel_1x1 { 1.0 } else { 0.0 }),
        ),
    ]
}

/// Serialize a parameter store plus training state. Record order is fixed:
/// config, training state, parameter values in insertion order, then ADAM
/// moments of the learnable entries.
pub fn save_checkpoint<E: Element>(
    store: &ParamStore<E>,
    cfg: &NetworkConfig,
    state: &TrainState,
    path: &Path,
) -> Result<()> {
    let mut records: Vec<(String, Tensor<E>)> = config_records(cfg);
    records.push(("__train.iter".into(), scalar(state.iter as f64)));
    for (i, m) in state.means.iter().enumerate() {
        records.push((format!("__train.mean{i}"), scalar(*m)));
    }
    for p in store.iter() {
        records.push((p.name.clone(), p.value.clone()));
    }
    for p in store.iter() {
        if p.kind != ParamKind::Buffer {
            records.push((format!("opt.m.{}", p.name), p.m.clone()));
            records.push((format!("opt.v.{}", p.name), p.v.clone()));
        }
    }

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, t) in &records {
        write_record(&mut buf, name, t);
    }
    let hash = fnv1a64(&buf);
    buf.extend_from_slice(&hash.to_le_bytes());

    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(&buf)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// A parsed checkpoint: named tensors in file order.
#[derive(Debug)]
pub struct CheckpointFile<E: Element> {
    pub records: Vec<(String, Tensor<E>)>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(
                self.path,
                self.pos,
                format!("truncated while reading {what}"),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parse and verify a checkpoint file.
pub fn load_checkpoint<E: Element>(path: &Path) -> Result<CheckpointFile<E>> {
    let pstr = path.display().to_string();
    let buf = std::fs::read(path).map_err(|e| Error::io(&pstr, e))?;
    if buf.len() < 20 {
        return Err(Error::format(&pstr, buf.len(), "file too short"));
    }
    let (body, footer) = buf.split_at(buf.len() - 8);
    let stored = u64::from_le_bytes(footer.try_into().unwrap());
    let actual = fnv1a64(body);
    if stored != actual {
        return Err(Error::Checkpoint(format!(
            "{pstr}: checksum mismatch (stored {stored:016x}, computed {actual:016x})"
        )));
    }

    let mut r = Reader {
        buf: body,
        pos: 0,
        path: &pstr,
    };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(&pstr, 0, "bad magic, not a checkpoint"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{pstr}: unsupported version {version}"
        )));
    }
    let count = r.u32("record count")? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name_pos = r.pos;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::format(&pstr, name_pos, "name is not UTF-8"))?
            .to_string();
        let tag_pos = r.pos;
        let tag = r.take(1, "dtype")?[0];
        let dtype = Dtype::from_tag(tag)
            .ok_or_else(|| Error::format(&pstr, tag_pos, format!("unknown dtype tag {tag}")))?;
        if dtype != E::DTYPE {
            return Err(Error::Checkpoint(format!(
                "{pstr}: tensor '{name}' has dtype {dtype}, expected {}",
                E::DTYPE
            )));
        }
        let rank = r.take(1, "rank")?[0] as usize;
        if rank == 0 || rank > crate::tensor::MAX_RANK {
            return Err(Error::format(&pstr, r.pos - 1, format!("bad rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let dim_pos = r.pos;
            let d = r.u32("extent")? as usize;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| Error::format(&pstr, dim_pos, "extent overflow"))?;
            dims.push(d);
        }
        let payload = r.take(numel * E::DTYPE.size(), "payload")?;
        let data: Vec<E> = payload
            .chunks_exact(E::DTYPE.size())
            .map(E::read_le)
            .collect();
        let t = Tensor::from_vec(&dims, data)
            .map_err(|e| Error::Checkpoint(format!("{pstr}: tensor '{name}': {e}")))?;
        records.push((name, t));
    }
    if r.pos != body.len() {
        return Err(Error::format(&pstr, r.pos, "trailing bytes after records"));
    }
    Ok(CheckpointFile { records })
}

impl<E: Element> CheckpointFile<E> {
    fn get(&self, name: &str) -> Result<&Tensor<E>> {
        self.records
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))
    }

    fn get_scalar(&self, name: &str) -> Result<f64> {
        let t = self.get(name)?;
        if t.len() != 1 {
            return Err(Error::Checkpoint(format!("'{name}' is not a scalar")));
        }
        Ok(t.data()[0].to_f64())
    }

    pub fn network_config(&self) -> Result<NetworkConfig> {
        let dec_res = |v: f64| match v as u32 {
            0 => Ok(Residual::None),
            1 => Ok(Residual::Local),
            2 => Ok(Residual::Global),
            x => Err(Error::Checkpoint(format!("bad residual code {x}"))),
        };
        let dec_sur = |v: f64| match v as u32 {
            0 => Ok(SurMode::None),
            1 => Ok(SurMode::Single),
            2 => Ok(SurMode::Full),
            x => Err(Error::Checkpoint(format!("bad sur_mode code {x}"))),
        };
        let dec_act = |v: f64| match v as u32 {
            0 => Ok(ActKind::Relu),
            1 => Ok(ActKind::Prelu),
            x => Err(Error::Checkpoint(format!("bad activation code {x}"))),
        };
        Ok(NetworkConfig {
            num_classes: self.get_scalar("__cfg.classes")? as usize,
            blocks_stage2: self.get_scalar("__cfg.m")? as usize,
            blocks_stage3: self.get_scalar("__cfg.n")? as usize,
            stage_channels: [
                self.get_scalar("__cfg.c1")? as usize,
                self.get_scalar("__cfg.c2")? as usize,
                self.get_scalar("__cfg.c3")? as usize,
            ],
            dilations: [
                self.get_scalar("__cfg.d2")? as usize,
                self.get_scalar("__cfg.d3")? as usize,
            ],
            input_injection: self.get_scalar("__cfg.injection")? != 0.0,
            sur_mode: dec_sur(self.get_scalar("__cfg.sur_mode")?)?,
            use_glo: self.get_scalar("__cfg.use_glo")? != 0.0,
            glo_reduction: self.get_scalar("__cfg.glo_reduction")? as usize,
            residual: dec_res(self.get_scalar("__cfg.residual")?)?,
            activation: dec_act(self.get_scalar("__cfg.activation")?)?,
            interchannel_1x1: self.get_scalar("__cfg.interchannel")? != 0.0,
        })
    }

    pub fn train_state(&self) -> Result<TrainState> {
        Ok(TrainState {
            iter: self.get_scalar("__train.iter")? as u64,
            means: [
                self.get_scalar("__train.mean0")?,
                self.get_scalar("__train.mean1")?,
                self.get_scalar("__train.mean2")?,
            ],
        })
    }
}

impl<E: Element> Network<E> {
    /// Write the model, optimizer state and configuration to `path`.
    pub fn save(&self, path: &Path, state: &TrainState) -> Result<()> {
        save_checkpoint(self.params(), self.config(), state, path)
    }

    /// Rebuild a network from a checkpoint alone. Every tensor in the file
    /// must match an entry of the rebuilt model and vice versa.
    pub fn load(path: &Path) -> Result<(Network<E>, TrainState)> {
        let file = load_checkpoint::<E>(path)?;
        let cfg = file.network_config()?;
        let state = file.train_state()?;
        // The RNG only sets the initial values, which are all overwritten.
        let mut rng = Pcg32::new(0, 0);
        let mut net = Network::build(cfg, &mut rng)?;

        let mut expected: usize = 0;
        for (name, tensor) in &file.records {
            if name.starts_with("__") {
                continue;
            }
            expected += 1;
            if let Some(rest) = name.strip_prefix("opt.m.") {
                let id = net.params().lookup(rest).ok_or_else(|| {
                    Error::Checkpoint(format!("missing tensor '{rest}' for moment record"))
                })?;
                net.params_mut().get_mut(id).m = tensor.clone();
            } else if let Some(rest) = name.strip_prefix("opt.v.") {
                let id = net.params().lookup(rest).ok_or_else(|| {
                    Error::Checkpoint(format!("missing tensor '{rest}' for moment record"))
                })?;
                net.params_mut().get_mut(id).v = tensor.clone();
            } else {
                net.params_mut().load_value(name, tensor.clone())?;
            }
        }
        let learnable = net.params().iter().filter(|p| p.kind != ParamKind::Buffer).count();
        let want = net.params().len() + 2 * learnable;
        if expected != want {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {expected} model records, the configured model needs {want}"
            )));
        }
        Ok((net, state))
    }
}
