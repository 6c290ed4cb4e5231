//! Checkpoint files: magic, config fields, parameter sections, NormStats.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::model::init_params;
use super::params::ParamStore;
use super::NetConfig;
use crate::binio::{self, read_u64, write_u32, write_u64};
use crate::error::{Error, Result};
use crate::flow::NormStats;

pub const PLANNER_MAGIC: &[u8; 4] = b"F4DC";
const MAX_FIELDS: usize = 64;

/// Writes `magic`, the init seed, the config fields, every parameter section
/// and the normalization statistics.
pub fn write_store<W: Write>(
    w: &mut W,
    magic: &[u8; 4],
    fields: &[u64],
    store: &ParamStore,
    stats: &NormStats,
) -> Result<()> {
    w.write_all(magic)?;
    write_u64(w, store.seed())?;
    write_u32(w, fields.len() as u32)?;
    for &f in fields {
        write_u64(w, f)?;
    }
    store.write_sections(w)?;
    stats.write(w)
}

/// Reads the header written by [`write_store`]: `(seed, fields)`.
pub fn read_header<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<(u64, Vec<u64>)> {
    binio::expect_magic(r, magic)?;
    let seed = read_u64(r)?;
    let count = binio::read_len(r, MAX_FIELDS, "config field count")?;
    let fields = (0..count)
        .map(|_| read_u64(r))
        .collect::<Result<Vec<_>>>()?;
    Ok((seed, fields))
}

/// Reads the parameter sections into `store` (whose layout must match) and
/// the trailing statistics.
pub fn read_body<R: Read>(r: &mut R, store: &mut ParamStore) -> Result<NormStats> {
    store.read_sections_into(r)?;
    NormStats::read(r)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub cfg: NetConfig,
    pub store: ParamStore,
    pub stats: NormStats,
}

fn config_fields(c: &NetConfig) -> Vec<u64> {
    [
        c.c,
        c.heads,
        c.n_local,
        c.n_3d,
        c.dit_depth,
        c.resampler_blocks,
        c.cross_blocks,
        c.feat_tokens,
        c.mlp_ratio,
        c.k,
        c.n,
        c.d_obs,
        c.d_teacher,
        c.vocab,
        c.frame_first as usize,
    ]
    .iter()
    .map(|&v| v as u64)
    .collect()
}

fn config_from_fields(f: &[u64]) -> Result<NetConfig> {
    if f.len() != 15 {
        return Err(Error::Format(format!(
            "planner header has {} config fields, expected 15",
            f.len()
        )));
    }
    let u = |i: usize| f[i] as usize;
    let cfg = NetConfig {
        c: u(0),
        heads: u(1),
        n_local: u(2),
        n_3d: u(3),
        dit_depth: u(4),
        resampler_blocks: u(5),
        cross_blocks: u(6),
        feat_tokens: u(7),
        mlp_ratio: u(8),
        k: u(9),
        n: u(10),
        d_obs: u(11),
        d_teacher: u(12),
        vocab: u(13),
        frame_first: f[14] != 0,
    };
    cfg.validate()
        .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    Ok(cfg)
}

pub fn write_checkpoint<W: Write>(w: &mut W, ck: &Checkpoint) -> Result<()> {
    write_store(
        w,
        PLANNER_MAGIC,
        &config_fields(&ck.cfg),
        &ck.store,
        &ck.stats,
    )
}

/// Reads a planner checkpoint. When `expect` is given, a checkpoint built
/// for a different configuration is rejected.
pub fn read_checkpoint<R: Read>(r: &mut R, expect: Option<&NetConfig>) -> Result<Checkpoint> {
    let (seed, fields) = read_header(r, PLANNER_MAGIC)?;
    let cfg = config_from_fields(&fields)?;
    if let Some(e) = expect {
        if *e != cfg {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint config {cfg:?} differs from {e:?}"
            )));
        }
    }
    let mut store = init_params(&cfg, seed)?;
    let stats = read_body(r, &mut store)?;
    Ok(Checkpoint { cfg, store, stats })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, ck)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, expect: Option<&NetConfig>) -> Result<Checkpoint> {
    read_checkpoint(&mut BufReader::new(File::open(path)?), expect)
}
