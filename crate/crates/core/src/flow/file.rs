//! Binary model container.
//!
//! Layout (little-endian): magic `GCRBFLOW`, `u32` version, `u32` length and
//! JSON architecture descriptor, `u32` blob count, then per blob a `u64`
//! element count and that many `f64`s, and finally a CRC32 of everything
//! before it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Layer, LayerDesc};
use crate::linalg::Matrix;
use crate::oracles::edge::EdgeSpec;

use super::{ConditionalFlow, Conditioning, FlowKind, FlowMeta};

pub const MAGIC: &[u8; 8] = b"GCRBFLOW";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum KindDesc {
    Learned { layers: Vec<LayerDesc> },
    LinearOracle,
    ScaleOracle { sigma: f64, stack: usize },
    NlfOracle { spec: EdgeSpec, alpha: f64, delta: f64 },
}

#[derive(Serialize, Deserialize)]
struct Descriptor {
    dim: usize,
    theta_dim: usize,
    kind: KindDesc,
    /// `(rows, cols)` of every blob, in order.
    shapes: Vec<(usize, usize)>,
    #[serde(default)]
    conditioning: Option<Conditioning>,
    meta: FlowMeta,
}

pub fn to_bytes(flow: &ConditionalFlow) -> Result<Vec<u8>> {
    let (kind, blobs): (KindDesc, Vec<&Matrix>) = match flow.kind() {
        FlowKind::Learned => {
            let layers = flow
                .layers()
                .iter()
                .map(|l| l.desc().ok_or_else(|| Error::UnsupportedFlow(format!("{} in a learned flow", l.name()))))
                .collect::<Result<Vec<_>>>()?;
            (KindDesc::Learned { layers }, flow.params())
        }
        FlowKind::LinearOracle { a, l } => (KindDesc::LinearOracle, vec![a, l]),
        FlowKind::ScaleOracle { sigma, stack } => (KindDesc::ScaleOracle { sigma: *sigma, stack: *stack }, vec![]),
        FlowKind::NlfOracle { spec, alpha, delta } => {
            (KindDesc::NlfOracle { spec: spec.clone(), alpha: *alpha, delta: *delta }, vec![])
        }
    };
    let desc = Descriptor {
        dim: flow.dim(),
        theta_dim: flow.theta_dim(),
        kind,
        shapes: blobs.iter().map(|m| m.shape()).collect(),
        conditioning: flow.conditioning().cloned(),
        meta: flow.meta.clone(),
    };
    let json = serde_json::to_vec(&desc).map_err(|e| Error::CorruptFile(format!("descriptor encoding: {e}")))?;
    let mut out = Vec::with_capacity(64 + json.len() + 8 * flow.n_weights());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(json.len()).expect("descriptor under 4 GiB").to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(blobs.len() as u32).to_le_bytes());
    for m in blobs {
        out.extend_from_slice(&(m.as_slice().len() as u64).to_le_bytes());
        for v in m.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::CorruptFile("unexpected end of file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<ConditionalFlow> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::CorruptFile("not a flow model file".into()));
    }
    if bytes.len() < 12 {
        return Err(Error::CorruptFile("truncated header".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(Error::VersionMismatch { found: version, expected: VERSION });
    }
    if bytes.len() < 16 {
        return Err(Error::CorruptFile("truncated file".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
        return Err(Error::CorruptFile("checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 12 };
    let len = r.u32()? as usize;
    let desc: Descriptor =
        serde_json::from_slice(r.take(len)?).map_err(|e| Error::CorruptFile(format!("descriptor: {e}")))?;
    let count = r.u32()? as usize;
    if count != desc.shapes.len() {
        return Err(Error::CorruptFile("blob count disagrees with descriptor".into()));
    }
    let mut blobs = Vec::with_capacity(count);
    for &(rows, cols) in &desc.shapes {
        let n = r.u64()? as usize;
        if n != rows * cols {
            return Err(Error::CorruptFile("blob length disagrees with its shape".into()));
        }
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::CorruptFile("blob too large".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        blobs.push(Matrix::new(rows, cols, data).map_err(|_| Error::CorruptFile("non-finite weight".into()))?);
    }
    if r.pos != body.len() {
        return Err(Error::CorruptFile("trailing bytes".into()));
    }
    let mut flow = match desc.kind {
        KindDesc::Learned { layers } => {
            let mut rest = blobs.into_iter();
            let mut built = Vec::with_capacity(layers.len());
            for d in &layers {
                let n = blob_count(d);
                let mine: Vec<Matrix> = rest.by_ref().take(n).collect();
                built.push(Layer::from_desc(d, mine)?);
            }
            if rest.next().is_some() {
                return Err(Error::CorruptFile("unused weight blobs".into()));
            }
            ConditionalFlow::from_parts(desc.dim, desc.theta_dim, built, FlowKind::Learned, FlowMeta::default())
        }
        KindDesc::LinearOracle => {
            let mut it = blobs.into_iter();
            match (it.next(), it.next()) {
                (Some(a), Some(l)) => ConditionalFlow::linear_oracle(a, l)?,
                _ => return Err(Error::CorruptFile("linear generator needs A and L".into())),
            }
        }
        KindDesc::ScaleOracle { sigma, stack } => ConditionalFlow::scale_oracle(sigma, stack)?,
        KindDesc::NlfOracle { spec, alpha, delta } => ConditionalFlow::nlf_oracle(spec, alpha, delta)?,
    };
    if flow.dim() != desc.dim || flow.theta_dim() != desc.theta_dim {
        return Err(Error::CorruptFile("dimensions disagree with layers".into()));
    }
    flow.set_conditioning(desc.conditioning).map_err(|e| Error::CorruptFile(format!("conditioning: {e}")))?;
    flow.meta = desc.meta;
    Ok(flow)
}

fn blob_count(desc: &LayerDesc) -> usize {
    match desc {
        LayerDesc::ActNorm { .. } => 2,
        LayerDesc::LuLinear { .. } => 3,
        LayerDesc::AffineCoupling { net, .. } | LayerDesc::AffineInject { net, .. } => 4 * net.layers,
        LayerDesc::SplineCoupling { net, .. } => 2 * net.layers,
    }
}

pub fn save(flow: &ConditionalFlow, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(flow)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ConditionalFlow> {
    from_bytes(&fs::read(path)?)
}
