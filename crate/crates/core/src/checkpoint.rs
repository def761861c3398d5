//! Binary checkpoint container (`.bltk`).
//!
//! All integers are little-endian.
//!
//! ```text
//! magic      4 bytes  "BLTK"
//! version    u16      1
//! count      u32      number of entries
//! entry*:
//!   name_len u16, name (UTF-8)
//!   kind     u8       0 linear, 1 conv2d, 2 vector (bias / affine)
//!   flags    u8       bit 0: rho present, bit 1: prunable
//!   ndim     u8, dims u32 * ndim
//!   mu       f32 * n
//!   rho      f32 * n  (only if flag bit 0)
//!   mask     ceil(n / 8) bytes, entry i at bit (i % 8) of byte i / 8
//! seed       u64
//! level      u32
//! lineage    u8       0 imp, 1 lrr, 2 reinit, 3 shuffle_global,
//!                     4 shuffle_even, 5 shuffle_layerwise, 6 transplant
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::models::{Model, ParamState};
use crate::pruning::{Lineage, PruneMask};
use crate::variational::LayerKind;

pub const MAGIC: &[u8; 4] = b"BLTK";
pub const VERSION: u16 = 1;

const FLAG_RHO: u8 = 1;
const FLAG_PRUNABLE: u8 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntryKind {
    Linear,
    Conv2d,
    Vector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub kind: EntryKind,
    pub prunable: bool,
    pub shape: Vec<usize>,
    pub mu: Vec<f32>,
    pub rho: Option<Vec<f32>>,
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
    pub seed: u64,
    pub level: u32,
    pub lineage: Lineage,
}

impl Checkpoint {
    /// Snapshot of `state` with the model's layer layout and masks.
    pub fn from_state(model: &Model, state: &ParamState, seed: u64, level: u32, lineage: Lineage) -> Result<Self> {
        if state.weights.len() != model.layers().len() || state.aux.len() != model.aux().len() {
            return Err(Error::Shape {
                op: "checkpoint",
                lhs: vec![model.layers().len(), model.aux().len()],
                rhs: vec![state.weights.len(), state.aux.len()],
            });
        }
        let mut entries = Vec::with_capacity(state.weights.len() + state.aux.len());
        for (layer, (mu, rho)) in model.layers().iter().zip(&state.weights) {
            entries.push(Entry {
                name: layer.name.clone(),
                kind: match layer.spec.kind {
                    LayerKind::Linear => EntryKind::Linear,
                    LayerKind::Conv2d { .. } => EntryKind::Conv2d,
                },
                prunable: layer.spec.prunable,
                shape: layer.weight.shape.clone(),
                mu: mu.clone(),
                rho: rho.clone(),
                mask: layer.weight.mask.clone(),
            });
        }
        for (a, v) in model.aux().iter().zip(&state.aux) {
            entries.push(Entry {
                name: a.name.clone(),
                kind: EntryKind::Vector,
                prunable: false,
                shape: vec![v.len()],
                mu: v.clone(),
                rho: None,
                mask: vec![true; v.len()],
            });
        }
        Ok(Self {
            entries,
            seed,
            level,
            lineage,
        })
    }

    pub fn from_model(model: &Model, seed: u64, level: u32, lineage: Lineage) -> Self {
        Self::from_state(model, &model.state(), seed, level, lineage).expect("model state matches model")
    }

    /// Parameters in [`ParamState`] layout.
    pub fn state(&self) -> ParamState {
        let mut state = ParamState {
            weights: Vec::new(),
            aux: Vec::new(),
        };
        for e in &self.entries {
            match e.kind {
                EntryKind::Vector => state.aux.push(e.mu.clone()),
                _ => state.weights.push((e.mu.clone(), e.rho.clone())),
            }
        }
        state
    }

    /// Masks of the prunable entries, in stored order.
    pub fn mask(&self) -> PruneMask {
        PruneMask {
            layers: self
                .entries
                .iter()
                .filter(|e| e.prunable)
                .map(|e| e.mask.clone())
                .collect(),
            level: self.level,
            lineage: self.lineage,
        }
    }

    /// Loads parameters and masks into a model of matching layout.
    pub fn apply(&self, model: &mut Model) -> Result<()> {
        let layers = model.layers().len();
        let names: Vec<(String, Vec<usize>)> = model
            .layers()
            .iter()
            .map(|l| (l.name.clone(), l.weight.shape.clone()))
            .chain(model.aux().iter().map(|a| (a.name.clone(), vec![a.value.len()])))
            .collect();
        if names.len() != self.entries.len() {
            return Err(Error::Shape {
                op: "checkpoint apply",
                lhs: vec![names.len()],
                rhs: vec![self.entries.len()],
            });
        }
        for (i, ((name, shape), e)) in names.iter().zip(&self.entries).enumerate() {
            let is_layer = i < layers;
            if *name != e.name || *shape != e.shape || is_layer == (e.kind == EntryKind::Vector) {
                return Err(Error::invalid(format!(
                    "checkpoint entry `{}` {:?} does not match model parameter `{name}` {shape:?}",
                    e.name, e.shape
                )));
            }
        }
        model.load_state(&self.state())?;
        for (layer, e) in model.layers_mut().iter_mut().zip(&self.entries) {
            layer.weight.set_mask(&e.mask)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(match e.kind {
                EntryKind::Linear => 0,
                EntryKind::Conv2d => 1,
                EntryKind::Vector => 2,
            });
            let mut flags = 0;
            if e.rho.is_some() {
                flags |= FLAG_RHO;
            }
            if e.prunable {
                flags |= FLAG_PRUNABLE;
            }
            out.push(flags);
            out.push(e.shape.len() as u8);
            for &d in &e.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &e.mu {
                out.extend_from_slice(&v.to_le_bytes());
            }
            if let Some(rho) = &e.rho {
                for v in rho {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            let mut bits = vec![0u8; e.mask.len().div_ceil(8)];
            for (i, &m) in e.mask.iter().enumerate() {
                if m {
                    bits[i / 8] |= 1 << (i % 8);
                }
            }
            out.extend_from_slice(&bits);
        }
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.level.to_le_bytes());
        out.push(self.lineage.code());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(r.error(0, "bad magic"));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(r.error(4, &format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let at = r.pos;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| r.error(at, "entry name is not UTF-8"))?
                .to_string();
            let at = r.pos;
            let kind = match r.u8()? {
                0 => EntryKind::Linear,
                1 => EntryKind::Conv2d,
                2 => EntryKind::Vector,
                k => return Err(r.error(at, &format!("unknown entry kind {k}"))),
            };
            let flags = r.u8()?;
            let ndim = r.u8()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mu = r.f32s(n)?;
            let rho = if flags & FLAG_RHO != 0 { Some(r.f32s(n)?) } else { None };
            let bits = r.take(n.div_ceil(8))?;
            let mask = (0..n).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect();
            entries.push(Entry {
                name,
                kind,
                prunable: flags & FLAG_PRUNABLE != 0,
                shape,
                mu,
                rho,
                mask,
            });
        }
        let seed = r.u64()?;
        let level = r.u32()?;
        let at = r.pos;
        let code = r.u8()?;
        let lineage = Lineage::from_code(code).ok_or_else(|| r.error(at, &format!("unknown lineage {code}")))?;
        if r.pos != bytes.len() {
            return Err(r.error(r.pos, "trailing bytes"));
        }
        Ok(Self {
            entries,
            seed,
            level,
            lineage,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn error(&self, offset: usize, message: &str) -> Error {
        Error::Format {
            what: "checkpoint",
            offset,
            message: message.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| self.error(self.pos, "unexpected end of data"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| self.error(self.pos, "size overflow"))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
