//! Versioned binary dump of hierarchical matrices and factors.
//!
//! Layout (all integers little-endian, reals IEEE-754 binary64 LE):
//!
//! ```text
//! magic     8 bytes   "HMATDMP1"
//! version   u32       1
//! kind      u8        0 covariance | 1 LL^T factor | 2 LDL^T factor
//! n         u64       matrix dimension
//! d         u32       spatial dimension
//! policy    u8 + 8B   0 fixed (u64 k) | 1 adaptive (f64 eps bits)
//! tree_hash u64       fingerprint of the cluster/block trees
//! records   u64       number of leaf records
//! record*   u32 id, u8 tag, u32 rows, u32 cols [, u32 rank], f64 data...
//!           tag 0: dense, rows*cols reals row-major
//!           tag 1: low rank, rows*rank reals (U) then cols*rank reals (V)
//! extra     kind 2 only: n reals (the LDL^T diagonal)
//! ```
//!
//! Records are written for holder blocks in ascending block id; mirrored
//! blocks are reconstructed from their partners at load time. A dump can only
//! be loaded against trees with an identical fingerprint.

use super::{AssemblyStats, HMatrix, LeafData, RankPolicy};
use crate::dense::Mat;
use crate::error::{Error, Result};
use crate::fnv1a64;
use crate::geometry::{BlockClusterTree, ClusterTree};
use std::io::{Read, Write};
use std::sync::Arc;

pub const MAGIC: &[u8; 8] = b"HMATDMP1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DumpKind {
    Covariance,
    FactorLl,
    FactorLdl,
}

impl DumpKind {
    fn to_u8(self) -> u8 {
        match self {
            DumpKind::Covariance => 0,
            DumpKind::FactorLl => 1,
            DumpKind::FactorLdl => 2,
        }
    }

    fn from_u8(b: u8) -> Result<Self> {
        match b {
            0 => Ok(DumpKind::Covariance),
            1 => Ok(DumpKind::FactorLl),
            2 => Ok(DumpKind::FactorLdl),
            other => Err(Error::Format(format!("unknown dump kind {other}"))),
        }
    }
}

/// Fingerprint binding a dump to its cluster/block trees.
pub fn tree_fingerprint(ct: &ClusterTree, bt: &BlockClusterTree) -> u64 {
    let mut bytes = Vec::with_capacity(32);
    bytes.extend_from_slice(&ct.structural_hash().to_le_bytes());
    bytes.extend_from_slice(&bt.eta().to_bits().to_le_bytes());
    bytes.extend_from_slice(&(bt.block_count() as u64).to_le_bytes());
    fnv1a64(&bytes)
}

pub struct Header {
    pub kind: DumpKind,
    pub n: u64,
    pub dim: u32,
    pub policy: RankPolicy,
    pub tree_hash: u64,
    pub records: u64,
}

pub fn write_header<W: Write>(w: &mut W, h: &Header) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[h.kind.to_u8()])?;
    w.write_all(&h.n.to_le_bytes())?;
    w.write_all(&h.dim.to_le_bytes())?;
    match h.policy {
        RankPolicy::Fixed { k } => {
            w.write_all(&[0u8])?;
            w.write_all(&(k as u64).to_le_bytes())?;
        }
        RankPolicy::Adaptive { eps } => {
            w.write_all(&[1u8])?;
            w.write_all(&eps.to_bits().to_le_bytes())?;
        }
    }
    w.write_all(&h.tree_hash.to_le_bytes())?;
    w.write_all(&h.records.to_le_bytes())?;
    Ok(())
}

fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

pub fn read_header<R: Read>(r: &mut R) -> Result<Header> {
    let magic: [u8; 8] = read_exact(r)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic; not an hmatern dump".into()));
    }
    let version = u32::from_le_bytes(read_exact(r)?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported dump version {version}")));
    }
    let kind = DumpKind::from_u8(read_exact::<R, 1>(r)?[0])?;
    let n = u64::from_le_bytes(read_exact(r)?);
    let dim = u32::from_le_bytes(read_exact(r)?);
    let ptag = read_exact::<R, 1>(r)?[0];
    let payload = read_exact::<R, 8>(r)?;
    let policy = match ptag {
        0 => RankPolicy::Fixed { k: u64::from_le_bytes(payload) as usize },
        1 => RankPolicy::Adaptive { eps: f64::from_bits(u64::from_le_bytes(payload)) },
        other => return Err(Error::Format(format!("unknown policy tag {other}"))),
    };
    let tree_hash = u64::from_le_bytes(read_exact(r)?);
    let records = u64::from_le_bytes(read_exact(r)?);
    Ok(Header { kind, n, dim, policy, tree_hash, records })
}

fn write_f64s<W: Write>(w: &mut W, data: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 8);
    for &x in data {
        buf.extend_from_slice(&x.to_bits().to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
        .collect())
}

pub fn write_leaf_record<W: Write>(w: &mut W, id: u32, data: &LeafData) -> Result<()> {
    w.write_all(&id.to_le_bytes())?;
    match data {
        LeafData::Dense(m) => {
            w.write_all(&[0u8])?;
            w.write_all(&(m.nrows() as u32).to_le_bytes())?;
            w.write_all(&(m.ncols() as u32).to_le_bytes())?;
            write_f64s(w, m.data())?;
        }
        LeafData::LowRank { u, v } => {
            w.write_all(&[1u8])?;
            w.write_all(&(u.nrows() as u32).to_le_bytes())?;
            w.write_all(&(v.nrows() as u32).to_le_bytes())?;
            w.write_all(&(u.ncols() as u32).to_le_bytes())?;
            write_f64s(w, u.data())?;
            write_f64s(w, v.data())?;
        }
    }
    Ok(())
}

pub fn read_leaf_record<R: Read>(r: &mut R) -> Result<(u32, LeafData)> {
    let id = u32::from_le_bytes(read_exact(r)?);
    let tag = read_exact::<R, 1>(r)?[0];
    let rows = u32::from_le_bytes(read_exact(r)?) as usize;
    let cols = u32::from_le_bytes(read_exact(r)?) as usize;
    let data = match tag {
        0 => {
            let vals = read_f64s(r, rows * cols)?;
            let mut m = Mat::zeros(rows, cols);
            m.data_mut().copy_from_slice(&vals);
            LeafData::Dense(m)
        }
        1 => {
            let rank = u32::from_le_bytes(read_exact(r)?) as usize;
            let uvals = read_f64s(r, rows * rank)?;
            let vvals = read_f64s(r, cols * rank)?;
            let mut u = Mat::zeros(rows, rank);
            u.data_mut().copy_from_slice(&uvals);
            let mut v = Mat::zeros(cols, rank);
            v.data_mut().copy_from_slice(&vvals);
            LeafData::LowRank { u, v }
        }
        other => return Err(Error::Format(format!("unknown leaf tag {other}"))),
    };
    Ok((id, data))
}

impl HMatrix {
    /// Serialize to the versioned binary dump format.
    pub fn dump<W: Write>(&self, w: &mut W) -> Result<()> {
        let holders: Vec<u32> = self
            .block_tree()
            .leaf_ids()
            .iter()
            .copied()
            .filter(|&id| self.is_holder(id))
            .collect();
        write_header(
            w,
            &Header {
                kind: DumpKind::Covariance,
                n: self.n() as u64,
                dim: self.cluster_tree().dim() as u32,
                policy: self.policy(),
                tree_hash: tree_fingerprint(self.cluster_tree(), self.block_tree()),
                records: holders.len() as u64,
            },
        )?;
        let mut sorted = holders;
        sorted.sort_unstable();
        for id in sorted {
            write_leaf_record(w, id, self.leaves[id as usize].as_ref().unwrap())?;
        }
        Ok(())
    }

    /// Load a dump produced against the same cluster/block trees.
    pub fn load<R: Read>(
        r: &mut R,
        ct: &Arc<ClusterTree>,
        bt: &Arc<BlockClusterTree>,
    ) -> Result<HMatrix> {
        let header = read_header(r)?;
        if header.kind != DumpKind::Covariance {
            return Err(Error::Format("dump does not contain a covariance matrix".into()));
        }
        if header.n as usize != ct.len() || header.dim as usize != ct.dim() {
            return Err(Error::Format("dump dimensions do not match the trees".into()));
        }
        if header.tree_hash != tree_fingerprint(ct, bt) {
            return Err(Error::Format("dump was built for different trees (hash mismatch)".into()));
        }
        let mut leaves: Vec<Option<LeafData>> = vec![None; bt.block_count()];
        for _ in 0..header.records {
            let (id, data) = read_leaf_record(r)?;
            if id as usize >= leaves.len() {
                return Err(Error::Format(format!("leaf record id {id} out of range")));
            }
            leaves[id as usize] = Some(data);
        }
        Ok(HMatrix {
            ct: Arc::clone(ct),
            bt: Arc::clone(bt),
            leaves,
            policy: header.policy,
            stats: AssemblyStats::default(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_block_tree, build_cluster_tree, generate_perturbed_mesh};
    use crate::hmatrix::assemble;
    use crate::kernels::MaternParams;

    #[test]
    fn dump_roundtrip_and_determinism() {
        let mut ps = generate_perturbed_mesh(20, 0.4, 21).unwrap();
        let ct = Arc::new(build_cluster_tree(&mut ps, 16).unwrap());
        let bt = Arc::new(build_block_tree(&ct, 2.0).unwrap());
        let params = MaternParams::new(1.0, 0.12, 0.5, 0.0).unwrap();
        let h = assemble(&ct, &bt, &params, RankPolicy::adaptive(1e-6)).unwrap();
        let mut buf1 = Vec::new();
        h.dump(&mut buf1).unwrap();
        let mut buf2 = Vec::new();
        h.dump(&mut buf2).unwrap();
        assert_eq!(buf1, buf2, "dump bytes are deterministic");

        let loaded = HMatrix::load(&mut buf1.as_slice(), &ct, &bt).unwrap();
        let a = h.to_dense(1 << 20).unwrap();
        let b = loaded.to_dense(1 << 20).unwrap();
        assert_eq!(a.data(), b.data());

        // a different tree is rejected
        let mut ps2 = generate_perturbed_mesh(20, 0.4, 22).unwrap();
        let ct2 = Arc::new(build_cluster_tree(&mut ps2, 16).unwrap());
        let bt2 = Arc::new(build_block_tree(&ct2, 2.0).unwrap());
        assert!(HMatrix::load(&mut buf1.as_slice(), &ct2, &bt2).is_err());
    }
}
