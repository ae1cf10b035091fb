//! Compensation archive: shared projections plus every trained scaling-vector set.
//!
//! Layout (little-endian), loadable without the backbone checkpoint:
//!
//! ```text
//! magic "DCVA" | version u32 = 1
//! rank u32 | seed u64 | d_max_in u32 | d_max_out u32
//! A_max (u32 count + f64 × count, row-major r × d_max_in)
//! B_max (u32 count + f64 × count, row-major d_max_out × r)
//! set count u32, then per set:
//!   set_id u32 | drift_time f64 | layer count u32
//!   per layer: d_vec (u32 count + f64s) | b_vec (u32 count + f64s)
//! SHA-256 of all preceding bytes (32 bytes)
//! ```

use std::path::Path;

use crate::bytes::{ByteReader, ByteWriter};
use crate::compensation::{LayerVectors, ScalingVectorSet, SharedProjections};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"DCVA";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CompensationArchive {
    pub projections: SharedProjections,
    /// Ordered by drift time.
    pub sets: Vec<ScalingVectorSet>,
}

impl CompensationArchive {
    pub fn drift_times(&self) -> Vec<f64> {
        self.sets.iter().map(|s| s.drift_time).collect()
    }

    /// The set to use at elapsed time `t`.
    pub fn active_set(&self, t: f64) -> Result<&ScalingVectorSet> {
        let idx = crate::compensation::select_active_set(t, &self.drift_times())?;
        Ok(&self.sets[idx])
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.projections;
        if p.a_max.len() != p.rank * p.d_max_in || p.b_max.len() != p.d_max_out * p.rank {
            return Err(Error::Shape("projection matrices do not match their declared dimensions".into()));
        }
        if self.sets.is_empty() {
            return Err(Error::Config("archive holds no scaling-vector sets".into()));
        }
        for w in self.sets.windows(2) {
            if !(w[0].drift_time < w[1].drift_time) {
                return Err(Error::Config("set drift times must be strictly increasing".into()));
            }
        }
        for s in &self.sets {
            for l in &s.layers {
                if l.d_vec.len() != p.rank || l.b_vec.len() > p.d_max_out {
                    return Err(Error::Shape(format!("set {} has vectors inconsistent with rank {}", s.set_id, p.rank)));
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let p = &self.projections;
        let mut w = ByteWriter::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.len_u32(p.rank);
        w.u64(p.seed);
        w.len_u32(p.d_max_in);
        w.len_u32(p.d_max_out);
        w.f64s(&p.a_max);
        w.f64s(&p.b_max);
        w.len_u32(self.sets.len());
        for s in &self.sets {
            w.u32(s.set_id);
            w.bytes(&s.drift_time.to_le_bytes());
            w.len_u32(s.layers.len());
            for l in &s.layers {
                w.f64s(&l.d_vec);
                w.f64s(&l.b_vec);
            }
        }
        w.finish()
    }

    pub fn from_bytes(data: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader::open(data, path, MAGIC, VERSION)?;
        let rank = r.len()?;
        let seed = r.u64()?;
        let d_max_in = r.len()?;
        let d_max_out = r.len()?;
        let a_max = r.f64s()?;
        let b_max = r.f64s()?;
        let n = r.len()?;
        let mut sets = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let set_id = r.u32()?;
            let drift_time = r.f64()?;
            let nl = r.len()?;
            let layers = (0..nl)
                .map(|_| {
                    Ok(LayerVectors {
                        d_vec: r.f64s()?,
                        b_vec: r.f64s()?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            sets.push(ScalingVectorSet {
                set_id,
                drift_time,
                layers,
            });
        }
        r.finish()?;
        let a = Self {
            projections: SharedProjections {
                rank,
                d_max_in,
                d_max_out,
                seed,
                a_max,
                b_max,
            },
            sets,
        };
        a.validate().map_err(|e| Error::format(path, None, e.to_string()))?;
        Ok(a)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&data, path)
    }
}
