//! Orchestration behind the command line: quantization runs, encode and
//! decode, evaluation, cross-backend verification and their reports.

pub mod config;
mod eval;
mod run;
mod verify;

use std::path::Path;

use serde::Serialize;

pub use config::{display_name, Mode, RunConfig};
pub use eval::{bd_summary, rd_curve, BdSummary, CurvePoint};
pub use run::{
    read_curve, run_bdrate, run_decode, run_encode, run_eval, run_make_fixture, run_quantize, run_verify, EvalRow,
    QuantizeRow,
};
pub use verify::{backend_pairs, verify, VerifyCell, VerifyReport, VerifyRow};

use crate::error::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;
pub const EXIT_INFEASIBLE: i32 = 4;

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::QuantConfig(_) | Error::InvalidSpec(_) => EXIT_CONFIG,
        Error::VerifyFailed { .. } => EXIT_VERIFY,
        Error::Infeasible { .. } | Error::NegativeShift { .. } | Error::Certificate { .. } => EXIT_INFEASIBLE,
        _ => EXIT_FAILURE,
    }
}

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "DETLIC_THREADS";

/// Sizes the global thread pool from [`THREADS_ENV`]; unset leaves the
/// default. Returns the pool size.
pub fn init_threads() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| Error::Config(format!("{THREADS_ENV}={v} is not a positive integer")))?;
            // a pool built earlier in the process keeps its size
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
        Err(std::env::VarError::NotPresent) => {}
        Err(e) => return Err(Error::Config(format!("{THREADS_ENV}: {e}"))),
    }
    Ok(rayon::current_num_threads())
}

/// CSV text whose first line is `# config=<json>`.
pub fn csv_with_config<S: Serialize>(config: &RunConfig, rows: &[S]) -> Result<Vec<u8>> {
    let mut out = format!("# config={}\n", config.to_json_line()).into_bytes();
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    out.extend(w.into_inner().map_err(|e| Error::Csv(e.into_error().into()))?);
    Ok(out)
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
