//! Cache directory: manifest, lock file, trace series and row checkpoints.

use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ethfilter::evolution::{RowStatus, StopReason, TraceSeries};
use ethfilter::C64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{RunConfig, CACHE_ENV};
use crate::CliError;

pub const MANIFEST: &str = "manifest.json";
pub const GRIDS: &str = "grids.bin";
pub const ED_GRIDS: &str = "ed_grids.bin";
const TRACE: &str = "trace.bin";
const ROWS: &str = "rows.ckpt";
const LOCK: &str = ".lock";
const TRACE_MAGIC: &[u8; 8] = b"ETHTRC1\0";
const ROW_MAGIC: &[u8; 8] = b"ETHROW1\0";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of every setting that changes the cached grids.
pub fn engine_hash(cfg: &RunConfig) -> Result<String, CliError> {
    let r = cfg.resolve()?;
    let e = &cfg.engine;
    let key = serde_json::json!({
        "observable": r.obs,
        "bond": e.bond,
        "shadow_ratio": e.shadow_ratio,
        "shadow_tol": e.shadow_tol,
        "trotter_dt": e.trotter_dt,
        "stop_threshold": e.stop_threshold,
        "t_max": e.t_max,
        "tn_cap": r.tn_cap,
        "trunc_cap": e.trunc_cap,
        "dmrg_bond": e.dmrg_bond,
        "strategy": e.strategy,
        "rows": e.rows,
        "alpha": cfg.filters.alpha,
        // Without a t_n cap the row count follows the frequency filter.
        "omega_filter": if r.tn_cap.is_none() { Some([r.sigma_omega, r.x_omega]) } else { None },
    });
    Ok(sha256_hex(key.to_string().as_bytes()))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub chain_hash: String,
    pub engine_hash: String,
    pub bounds: Option<BoundsRecord>,
    pub evolve: Option<EvolveRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundsRecord {
    pub e_min: Option<f64>,
    pub e_max: Option<f64>,
    pub alpha: f64,
    /// `estimate` or `override`.
    pub alpha_source: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvolveRecord {
    pub complete: bool,
    pub delta_t: f64,
    pub trace_m_max: usize,
    pub t_max: f64,
    pub trace_stop: StopReason,
    /// Narrowest energy filter the trace range supports at the configured `x`.
    pub attainable_sigma: f64,
    pub rows_done: usize,
    pub rows_total: usize,
    pub untrusted_rows: Vec<usize>,
    pub trunc_error: f64,
    pub flags: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointRow {
    pub n: usize,
    pub status: RowStatus,
    pub trunc: f64,
    pub row: Vec<C64>,
}

pub struct CacheDir {
    pub path: PathBuf,
    _lock: LockGuard,
}

struct LockGuard(PathBuf);

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

impl CacheDir {
    /// Resolve, create and lock the cache directory for `cfg`, refusing a mismatched manifest.
    pub fn open(cfg: &RunConfig, root_override: Option<&Path>) -> Result<Self, CliError> {
        let chain_hash = cfg.resolve()?.spec.content_hash();
        let engine = engine_hash(cfg)?;
        let path = match &cfg.io.cache_dir {
            Some(p) => p.clone(),
            None => {
                let root = root_override
                    .map(Path::to_path_buf)
                    .or_else(|| std::env::var_os(CACHE_ENV).map(PathBuf::from))
                    .unwrap_or_else(|| PathBuf::from(".ethfilter-cache"));
                root.join(format!("{}-{}", &chain_hash[..16], &engine[..16]))
            }
        };
        std::fs::create_dir_all(&path)?;
        let lock = path.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(CliError::Config(format!(
                    "cache {} is locked by another process (remove {} if stale)",
                    path.display(),
                    lock.display()
                )))
            }
            Err(e) => return Err(e.into()),
        }
        let dir = CacheDir { path, _lock: LockGuard(lock) };
        match dir.manifest()? {
            Some(m) if m.chain_hash != chain_hash || m.engine_hash != engine => {
                return Err(CliError::Config(format!(
                    "cache {} belongs to a different chain or engine configuration",
                    dir.path.display()
                )))
            }
            Some(_) => {}
            None => dir.write_manifest(&Manifest { chain_hash, engine_hash: engine, bounds: None, evolve: None })?,
        }
        Ok(dir)
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn manifest(&self) -> Result<Option<Manifest>, CliError> {
        let p = self.file(MANIFEST);
        if !p.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&p)?;
        serde_json::from_str(&text).map(Some).map_err(|e| CliError::Config(format!("corrupt manifest: {e}")))
    }

    pub fn write_manifest(&self, m: &Manifest) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(m).expect("manifest serializes");
        atomic_write(&self.file(MANIFEST), text.as_bytes())
    }

    pub fn update_manifest(&self, f: impl FnOnce(&mut Manifest)) -> Result<Manifest, CliError> {
        let mut m = self.manifest()?.unwrap_or_default();
        f(&mut m);
        self.write_manifest(&m)?;
        Ok(m)
    }

    pub fn write_trace(&self, s: &TraceSeries) -> Result<(), CliError> {
        let mut out = Vec::with_capacity(40 + 16 * s.values.len());
        out.extend_from_slice(TRACE_MAGIC);
        out.extend_from_slice(&s.delta_t.to_le_bytes());
        out.extend_from_slice(&s.trunc_error.to_le_bytes());
        out.push(match s.stop {
            StopReason::Threshold => 0,
            StopReason::HardTmax => 1,
            StopReason::Truncation => 2,
        });
        out.extend_from_slice(&(s.values.len() as u64).to_le_bytes());
        for z in &s.values {
            out.extend_from_slice(&z.re.to_le_bytes());
            out.extend_from_slice(&z.im.to_le_bytes());
        }
        atomic_write(&self.file(TRACE), &out)
    }

    pub fn read_trace(&self) -> Result<Option<TraceSeries>, CliError> {
        let p = self.file(TRACE);
        if !p.exists() {
            return Ok(None);
        }
        let mut buf = Vec::new();
        File::open(&p)?.read_to_end(&mut buf)?;
        let mut r = Bytes { buf: &buf, pos: 0 };
        if r.take(8)? != TRACE_MAGIC {
            return Err(corrupt("trace series"));
        }
        let delta_t = r.f64()?;
        let trunc_error = r.f64()?;
        let stop = match r.take(1)?[0] {
            0 => StopReason::Threshold,
            1 => StopReason::HardTmax,
            2 => StopReason::Truncation,
            _ => return Err(corrupt("trace stop code")),
        };
        let len = r.u64()? as usize;
        let values = (0..len).map(|_| Ok(C64::new(r.f64()?, r.f64()?))).collect::<Result<Vec<_>, CliError>>()?;
        Ok(Some(TraceSeries { values, delta_t, stop, trunc_error }))
    }

    pub fn append_row(&self, n: usize, status: RowStatus, trunc: f64, row: &[C64]) -> Result<(), CliError> {
        let p = self.file(ROWS);
        let fresh = !p.exists();
        let mut f = OpenOptions::new().create(true).append(true).open(&p)?;
        let mut out = Vec::with_capacity(24 + 16 * row.len());
        if fresh {
            out.extend_from_slice(ROW_MAGIC);
        }
        out.extend_from_slice(&(n as u64).to_le_bytes());
        out.push(status_code(status));
        out.extend_from_slice(&trunc.to_le_bytes());
        out.extend_from_slice(&(row.len() as u64).to_le_bytes());
        for z in row {
            out.extend_from_slice(&z.re.to_le_bytes());
            out.extend_from_slice(&z.im.to_le_bytes());
        }
        f.write_all(&out)?;
        f.sync_data()?;
        Ok(())
    }

    /// Checkpointed rows; a torn final record is dropped.
    pub fn read_rows(&self) -> Result<Vec<CheckpointRow>, CliError> {
        let p = self.file(ROWS);
        if !p.exists() {
            return Ok(vec![]);
        }
        let mut buf = Vec::new();
        File::open(&p)?.read_to_end(&mut buf)?;
        let mut r = Bytes { buf: &buf, pos: 0 };
        if r.take(8)? != ROW_MAGIC {
            return Err(corrupt("row checkpoint"));
        }
        let mut rows = Vec::new();
        while r.pos < buf.len() {
            let rec = (|| -> Result<_, CliError> {
                let n = r.u64()? as usize;
                let status = status_from(r.take(1)?[0])?;
                let trunc = r.f64()?;
                let len = r.u64()? as usize;
                let row = (0..len).map(|_| Ok(C64::new(r.f64()?, r.f64()?))).collect::<Result<Vec<_>, CliError>>()?;
                Ok(CheckpointRow { n, status, trunc, row })
            })();
            match rec {
                Ok(x) => rows.push(x),
                Err(_) => {
                    log::warn!("dropping a torn checkpoint record");
                    break;
                }
            }
        }
        Ok(rows)
    }

    pub fn clear_rows(&self) -> Result<(), CliError> {
        let p = self.file(ROWS);
        if p.exists() {
            std::fs::remove_file(p)?;
        }
        Ok(())
    }
}

fn status_code(s: RowStatus) -> u8 {
    match s {
        RowStatus::Computed => 0,
        RowStatus::Cutoff => 1,
        RowStatus::Skipped => 2,
        RowStatus::Untrusted => 3,
    }
}

fn status_from(b: u8) -> Result<RowStatus, CliError> {
    Ok(match b {
        0 => RowStatus::Computed,
        1 => RowStatus::Cutoff,
        2 => RowStatus::Skipped,
        3 => RowStatus::Untrusted,
        _ => return Err(corrupt("row status")),
    })
}

fn corrupt(what: &str) -> CliError {
    CliError::Numeric(ethfilter::Error::Cache(format!("corrupt {what}")))
}

pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Bytes<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Bytes<'_> {
    fn take(&mut self, k: usize) -> Result<&[u8], CliError> {
        if self.pos + k > self.buf.len() {
            return Err(corrupt("cache file (truncated)"));
        }
        let s = &self.buf[self.pos..self.pos + k];
        self.pos += k;
        Ok(s)
    }
    fn u64(&mut self) -> Result<u64, CliError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, CliError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(dir: &Path) -> RunConfig {
        let mut c = RunConfig::from_json(r#"{"version": 1, "chain": {"n": 4, "g": 1.0}}"#).unwrap();
        c.io.cache_dir = Some(dir.to_path_buf());
        c
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let d = tempfile::tempdir().unwrap();
        let c = cfg(d.path());
        let a = CacheDir::open(&c, None).unwrap();
        assert!(CacheDir::open(&c, None).is_err());
        drop(a);
        assert!(CacheDir::open(&c, None).is_ok());
    }

    #[test]
    fn mismatched_cache_refused() {
        let d = tempfile::tempdir().unwrap();
        let c = cfg(d.path());
        drop(CacheDir::open(&c, None).unwrap());
        let mut other = c.clone();
        other.chain.g = 1.5;
        assert!(matches!(CacheDir::open(&other, None), Err(CliError::Config(_))));
        let mut other = c.clone();
        other.engine.bond = 7;
        assert!(CacheDir::open(&other, None).is_err());
    }

    #[test]
    fn trace_and_rows_round_trip() {
        let d = tempfile::tempdir().unwrap();
        let dir = CacheDir::open(&cfg(d.path()), None).unwrap();
        let s = TraceSeries {
            values: vec![C64::new(16.0, 0.0), C64::new(0.1, -0.3)],
            delta_t: 0.2,
            stop: StopReason::Threshold,
            trunc_error: 1e-9,
        };
        dir.write_trace(&s).unwrap();
        let back = dir.read_trace().unwrap().unwrap();
        assert_eq!(back.values, s.values);
        assert_eq!((back.delta_t, back.stop, back.trunc_error), (s.delta_t, s.stop, s.trunc_error));
        dir.append_row(0, RowStatus::Computed, 0.0, &[C64::new(1.0, 2.0)]).unwrap();
        dir.append_row(1, RowStatus::Untrusted, 0.5, &[C64::new(3.0, 4.0)]).unwrap();
        let rows = dir.read_rows().unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(
            rows[1],
            CheckpointRow { n: 1, status: RowStatus::Untrusted, trunc: 0.5, row: vec![C64::new(3.0, 4.0)] }
        );
        // A torn tail is ignored.
        let mut f = OpenOptions::new().append(true).open(dir.file(ROWS)).unwrap();
        f.write_all(&[1, 2, 3]).unwrap();
        assert_eq!(dir.read_rows().unwrap().len(), 2);
        dir.clear_rows().unwrap();
        assert!(dir.read_rows().unwrap().is_empty());
    }
}
