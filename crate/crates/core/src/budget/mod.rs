//! KV-cache footprint arithmetic in exact integers.

use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::attention::HeadGeometry;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BudgetError {
    #[error("bytes per element must be 2, 4 or 8, got {0}")]
    ElementSize(u64),
    #[error("geometry stores zero bytes per token")]
    ZeroBytesPerToken,
    #[error("memory budget must be positive")]
    ZeroBudget,
    #[error("geometry needs {got} bytes per token, more than the {baseline}-byte baseline")]
    AboveBaseline { got: u64, baseline: u64 },
    #[error("unknown dtype {0:?} (expected bf16, f16, f32 or f64)")]
    DType(String),
    #[error("integer overflow")]
    Overflow,
}

/// Element types a cache may be stored in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CacheDType {
    Bf16,
    F16,
    F32,
    F64,
}

impl CacheDType {
    pub fn bytes(self) -> u64 {
        match self {
            Self::Bf16 | Self::F16 => 2,
            Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    pub fn parse(s: &str) -> Result<Self, BudgetError> {
        match s {
            "bf16" => Ok(Self::Bf16),
            "f16" | "fp16" => Ok(Self::F16),
            "f32" | "fp32" => Ok(Self::F32),
            "f64" | "fp64" => Ok(Self::F64),
            _ => Err(BudgetError::DType(s.to_string())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Bf16 => "bf16",
            Self::F16 => "f16",
            Self::F32 => "f32",
            Self::F64 => "f64",
        }
    }
}

/// `n_layers · n_kv_heads · (d_qk + d_vo) · bytes_per_elem`.
pub fn kv_bytes_per_token(geom: &HeadGeometry, n_layers: usize, bytes_per_elem: u64) -> Result<u64, BudgetError> {
    if ![2, 4, 8].contains(&bytes_per_elem) {
        return Err(BudgetError::ElementSize(bytes_per_elem));
    }
    [
        n_layers as u64,
        geom.n_kv_heads as u64,
        (geom.d_qk + geom.d_vo) as u64,
        bytes_per_elem,
    ]
    .into_iter()
    .try_fold(1u64, u64::checked_mul)
    .ok_or(BudgetError::Overflow)
}

pub fn cache_size(geom: &HeadGeometry, n_layers: usize, tokens: u64, bytes_per_elem: u64) -> Result<u64, BudgetError> {
    kv_bytes_per_token(geom, n_layers, bytes_per_elem)?
        .checked_mul(tokens)
        .ok_or(BudgetError::Overflow)
}

/// Tokens that fit in `budget` bytes (floor).
pub fn max_tokens(budget: u64, geom: &HeadGeometry, n_layers: usize, bytes_per_elem: u64) -> Result<u64, BudgetError> {
    if budget == 0 {
        return Err(BudgetError::ZeroBudget);
    }
    match kv_bytes_per_token(geom, n_layers, bytes_per_elem)? {
        0 => Err(BudgetError::ZeroBytesPerToken),
        b => Ok(budget / b),
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Footprint of one geometry and its size relative to a baseline.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CacheBudgetReport {
    pub d_qk: usize,
    pub d_vo: usize,
    pub n_layers: usize,
    pub n_kv_heads: usize,
    pub dtype: CacheDType,
    pub bytes_per_token: u64,
    pub tokens: u64,
    pub s_kv_bytes: u64,
    pub budget_bytes: u64,
    pub n_max_tokens: u64,
    /// Reduced fraction `bytes_per_token / baseline_bytes_per_token`.
    pub ratio_num: u64,
    pub ratio_den: u64,
}

impl CacheBudgetReport {
    pub fn new(
        geom: &HeadGeometry,
        baseline: &HeadGeometry,
        n_layers: usize,
        dtype: CacheDType,
        tokens: u64,
        budget_bytes: u64,
    ) -> Result<Self, BudgetError> {
        let b = dtype.bytes();
        let bytes_per_token = kv_bytes_per_token(geom, n_layers, b)?;
        let base = kv_bytes_per_token(baseline, n_layers, b)?;
        if bytes_per_token == 0 || base == 0 {
            return Err(BudgetError::ZeroBytesPerToken);
        }
        if bytes_per_token > base {
            return Err(BudgetError::AboveBaseline {
                got: bytes_per_token,
                baseline: base,
            });
        }
        let g = gcd(bytes_per_token, base);
        Ok(Self {
            d_qk: geom.d_qk,
            d_vo: geom.d_vo,
            n_layers,
            n_kv_heads: geom.n_kv_heads,
            dtype,
            bytes_per_token,
            tokens,
            s_kv_bytes: cache_size(geom, n_layers, tokens, b)?,
            budget_bytes,
            n_max_tokens: max_tokens(budget_bytes, geom, n_layers, b)?,
            ratio_num: bytes_per_token / g,
            ratio_den: base / g,
        })
    }

    pub fn ratio(&self) -> f64 {
        self.ratio_num as f64 / self.ratio_den as f64
    }
}

/// Published cache sizes (MB, 4000 tokens, bf16, 32 layers, 8 kv heads)
/// for `(d_qk, d_vo)`, against which the linear model is compared.
pub const REFERENCE_SKV_MB: [((usize, usize), u64); 10] = [
    ((128, 128), 256),
    ((64, 64), 128),
    ((32, 32), 64),
    ((16, 16), 32),
    ((64, 128), 172),
    ((32, 128), 160),
    ((16, 128), 144),
    ((128, 64), 172),
    ((128, 32), 160),
    ((128, 16), 144),
];

/// One reference row rescaled by the linear model: `256 · (d_qk+d_vo)/256`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ReferenceCheck {
    pub d_qk: usize,
    pub d_vo: usize,
    pub reference_mb: u64,
    pub linear_mb: u64,
}

impl ReferenceCheck {
    pub fn agrees(&self) -> bool {
        self.reference_mb == self.linear_mb
    }
}

/// Compares every reference row with the linear model anchored at the
/// (128, 128) baseline row.
pub fn reference_checks() -> Vec<ReferenceCheck> {
    let anchor = REFERENCE_SKV_MB[0].1;
    REFERENCE_SKV_MB
        .iter()
        .map(|&((d_qk, d_vo), reference_mb)| ReferenceCheck {
            d_qk,
            d_vo,
            reference_mb,
            linear_mb: anchor * (d_qk + d_vo) as u64 / 256,
        })
        .collect()
}

/// Note printed when a report's geometry has a reference row that the
/// linear model does not reproduce.
pub fn reference_note(report: &CacheBudgetReport) -> Option<String> {
    reference_checks()
        .into_iter()
        .find(|c| c.d_qk == report.d_qk && c.d_vo == report.d_vo && !c.agrees())
        .map(|c| {
            format!(
                "note: published s_kv for ({}, {}) is {} MB; the linear model gives {} MB ({}/256 of the 256 MB baseline)",
                c.d_qk,
                c.d_vo,
                c.reference_mb,
                c.linear_mb,
                c.d_qk + c.d_vo
            )
        })
}

pub const CSV_HEADER: &str =
    "d_qk,d_vo,n_layers,n_kv_heads,dtype,bytes_per_token,tokens,s_kv_bytes,budget_bytes,n_max_tokens,ratio_num,ratio_den,ratio";

pub fn render_csv(reports: &[CacheBudgetReport]) -> String {
    let mut s = String::new();
    writeln!(s, "{CSV_HEADER}").unwrap();
    for r in reports {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.d_qk,
            r.d_vo,
            r.n_layers,
            r.n_kv_heads,
            r.dtype.name(),
            r.bytes_per_token,
            r.tokens,
            r.s_kv_bytes,
            r.budget_bytes,
            r.n_max_tokens,
            r.ratio_num,
            r.ratio_den,
            crate::rope::sig9(r.ratio())
        )
        .unwrap();
    }
    s
}

/// Right-aligned text table, followed by any reference notes.
pub fn render_text(reports: &[CacheBudgetReport]) -> String {
    let header = [
        "d_qk",
        "d_vo",
        "bytes/token",
        "tokens",
        "s_kv bytes",
        "budget",
        "n_max",
        "ratio",
    ];
    let rows: Vec<[String; 8]> = reports
        .iter()
        .map(|r| {
            [
                r.d_qk.to_string(),
                r.d_vo.to_string(),
                r.bytes_per_token.to_string(),
                r.tokens.to_string(),
                r.s_kv_bytes.to_string(),
                r.budget_bytes.to_string(),
                r.n_max_tokens.to_string(),
                format!("{}/{} = {}", r.ratio_num, r.ratio_den, crate::rope::sig9(r.ratio())),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut s = String::new();
    let line = |cells: &[&str]| {
        let padded: Vec<String> = cells.iter().zip(widths).map(|(c, w)| format!("{c:>w$}")).collect();
        padded.join("  ")
    };
    writeln!(s, "{}", line(&header)).unwrap();
    for row in &rows {
        let cells: Vec<&str> = row.iter().map(String::as_str).collect();
        writeln!(s, "{}", line(&cells)).unwrap();
    }
    for r in reports {
        if let Some(note) = reference_note(r) {
            writeln!(s, "{note}").unwrap();
        }
    }
    s
}
