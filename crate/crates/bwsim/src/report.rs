//! Run reports: per-component cycle and cache breakdowns, layout
//! comparisons, and sweep tables, each emittable as pretty JSON, CSV or an
//! aligned text table.

use serde::{Deserialize, Serialize};

use crate::cache::LevelStats;
use crate::encoder::{Component, RunParams, RunResult};
use crate::error::SimError;

/// The effective configuration a report was produced under.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub layout: String,
    pub accelerator: String,
    pub kernel_size: usize,
    pub cores: usize,
    pub prefetch: bool,
    pub seq_len: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ff_dim: usize,
    pub layers: usize,
    pub l1_bytes: usize,
    pub l2_bytes: usize,
    pub line_bytes: usize,
    pub l1_assoc: usize,
    pub l2_assoc: usize,
    pub mem_latency: u64,
    pub seed: u64,
}

impl ConfigEcho {
    pub fn from_params(p: &RunParams) -> Self {
        ConfigEcho {
            layout: p.layout.name().to_string(),
            accelerator: p.accel.kind.name().to_string(),
            kernel_size: p.accel.kernel_size,
            cores: p.hierarchy.cores,
            prefetch: p.hierarchy.prefetch,
            seq_len: p.model.seq_len,
            model_dim: p.model.model_dim,
            heads: p.model.heads,
            head_dim: p.model.head_dim,
            ff_dim: p.model.ff_dim,
            layers: p.model.layers,
            l1_bytes: p.hierarchy.l1.capacity_bytes,
            l2_bytes: p.hierarchy.l2.capacity_bytes,
            line_bytes: p.hierarchy.l1.line_bytes,
            l1_assoc: p.hierarchy.l1.associativity,
            l2_assoc: p.hierarchy.l2.associativity,
            mem_latency: p.hierarchy.mem_latency,
            seed: p.seed,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LevelReport {
    pub accesses: u64,
    pub hits: u64,
    pub misses: u64,
    pub writebacks: u64,
    pub prefetch_fills: u64,
    pub miss_rate: f64,
}

impl From<&LevelStats> for LevelReport {
    fn from(s: &LevelStats) -> Self {
        LevelReport {
            accesses: s.accesses,
            hits: s.hits,
            misses: s.misses,
            writebacks: s.writebacks,
            prefetch_fills: s.prefetch_fills,
            miss_rate: s.miss_rate(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComponentReport {
    pub name: String,
    pub compute_cycles: u64,
    pub memory_cycles: u64,
    pub total_cycles: u64,
    pub l1: LevelReport,
    pub l2: LevelReport,
}

/// How the run's total cycles split between matrix-multiply components,
/// everything else, and (as a sub-slice of "everything else") the layout
/// conversions.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Shares {
    pub gemm_pct: f64,
    pub non_gemm_pct: f64,
    pub conversion_pct: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ConfigEcho,
    pub total_cycles: u64,
    pub compute_cycles: u64,
    pub memory_cycles: u64,
    pub components: Vec<ComponentReport>,
    pub l1: LevelReport,
    pub l2: LevelReport,
    pub shares: Shares,
    pub output_digest: String,
}

fn pct(part: u64, whole: u64) -> f64 {
    if whole == 0 {
        0.0
    } else {
        100.0 * part as f64 / whole as f64
    }
}

impl RunReport {
    pub fn build(p: &RunParams, r: &RunResult) -> Self {
        let components: Vec<ComponentReport> = Component::ALL
            .iter()
            .map(|&c| {
                let t = &r.timings[c.index()];
                ComponentReport {
                    name: c.name().to_string(),
                    compute_cycles: t.compute_cycles,
                    memory_cycles: t.memory_cycles,
                    total_cycles: t.compute_cycles + t.memory_cycles,
                    l1: (&t.l1).into(),
                    l2: (&t.l2).into(),
                }
            })
            .collect();
        let total = r.total_cycles();
        let gemm: u64 = Component::ALL
            .iter()
            .filter(|c| c.is_gemm())
            .map(|c| {
                let t = &r.timings[c.index()];
                t.compute_cycles + t.memory_cycles
            })
            .sum();
        let conv = {
            let t = &r.timings[Component::LayoutConversion.index()];
            t.compute_cycles + t.memory_cycles
        };
        RunReport {
            config: ConfigEcho::from_params(p),
            total_cycles: total,
            compute_cycles: r.total_compute_cycles(),
            memory_cycles: r.total_memory_cycles(),
            components,
            l1: (&r.cache.l1).into(),
            l2: (&r.cache.l2).into(),
            shares: Shares {
                gemm_pct: pct(gemm, total),
                non_gemm_pct: pct(total - gemm, total),
                conversion_pct: pct(conv, total),
            },
            output_digest: r.output.digest_hex(),
        }
    }

    pub fn component(&self, name: &str) -> Option<&ComponentReport> {
        self.components.iter().find(|c| c.name == name)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_csv(&self) -> Result<String, SimError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "component",
            "compute_cycles",
            "memory_cycles",
            "total_cycles",
            "l1_accesses",
            "l1_misses",
            "l1_miss_rate",
            "l2_accesses",
            "l2_misses",
            "l2_miss_rate",
        ])
        .map_err(csv_err)?;
        for c in &self.components {
            w.write_record([
                c.name.clone(),
                c.compute_cycles.to_string(),
                c.memory_cycles.to_string(),
                c.total_cycles.to_string(),
                c.l1.accesses.to_string(),
                c.l1.misses.to_string(),
                format!("{:.6}", c.l1.miss_rate),
                c.l2.accesses.to_string(),
                c.l2.misses.to_string(),
                format!("{:.6}", c.l2.miss_rate),
            ])
            .map_err(csv_err)?;
        }
        w.write_record([
            "Total".to_string(),
            self.compute_cycles.to_string(),
            self.memory_cycles.to_string(),
            self.total_cycles.to_string(),
            self.l1.accesses.to_string(),
            self.l1.misses.to_string(),
            format!("{:.6}", self.l1.miss_rate),
            self.l2.accesses.to_string(),
            self.l2.misses.to_string(),
            format!("{:.6}", self.l2.miss_rate),
        ])
        .map_err(csv_err)?;
        let bytes = w.into_inner().map_err(|e| SimError::Config(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| SimError::Config(e.to_string()))
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "run: layout={} accel={} k={} cores={} prefetch={} model={}x{} heads={} ff={} layers={} seed={}\n",
            self.config.layout,
            self.config.accelerator,
            self.config.kernel_size,
            self.config.cores,
            if self.config.prefetch { "on" } else { "off" },
            self.config.seq_len,
            self.config.model_dim,
            self.config.heads,
            self.config.ff_dim,
            self.config.layers,
            self.config.seed,
        ));
        out.push_str(&format!(
            "{:<18} {:>16} {:>16} {:>16} {:>14} {:>12} {:>9}\n",
            "component", "compute_cycles", "memory_cycles", "total_cycles", "l1_accesses", "l1_misses", "l1_miss%"
        ));
        for c in &self.components {
            out.push_str(&format!(
                "{:<18} {:>16} {:>16} {:>16} {:>14} {:>12} {:>8.3}%\n",
                c.name,
                c.compute_cycles,
                c.memory_cycles,
                c.total_cycles,
                c.l1.accesses,
                c.l1.misses,
                100.0 * c.l1.miss_rate,
            ));
        }
        out.push_str(&format!(
            "{:<18} {:>16} {:>16} {:>16} {:>14} {:>12} {:>8.3}%\n",
            "Total",
            self.compute_cycles,
            self.memory_cycles,
            self.total_cycles,
            self.l1.accesses,
            self.l1.misses,
            100.0 * self.l1.miss_rate,
        ));
        out.push_str(&format!(
            "shares: gemm {:.2}%  non-gemm {:.2}%  (conversion {:.2}%)\n",
            self.shares.gemm_pct, self.shares.non_gemm_pct, self.shares.conversion_pct
        ));
        out.push_str(&format!(
            "l2: accesses {} misses {} miss_rate {:.3}%  output_digest {}\n",
            self.l2.accesses,
            self.l2.misses,
            100.0 * self.l2.miss_rate,
            self.output_digest
        ));
        out
    }
}

fn csv_err(e: csv::Error) -> SimError {
    SimError::Config(format!("csv: {e}"))
}

/// Same model and machine, run under both layouts.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CompareReport {
    pub rwma: RunReport,
    pub bwma: RunReport,
    /// rwma total cycles / bwma total cycles.
    pub speedup: f64,
    /// rwma L1 misses / bwma L1 misses.
    pub l1_miss_ratio: f64,
    pub outputs_match: bool,
}

impl CompareReport {
    pub fn build(rwma: RunReport, bwma: RunReport) -> Self {
        let speedup = if bwma.total_cycles == 0 {
            0.0
        } else {
            rwma.total_cycles as f64 / bwma.total_cycles as f64
        };
        let l1_miss_ratio = if bwma.l1.misses == 0 {
            0.0
        } else {
            rwma.l1.misses as f64 / bwma.l1.misses as f64
        };
        let outputs_match = rwma.output_digest == bwma.output_digest;
        CompareReport { rwma, bwma, speedup, l1_miss_ratio, outputs_match }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.rwma.to_table());
        out.push('\n');
        out.push_str(&self.bwma.to_table());
        out.push_str(&format!(
            "\nspeedup (rwma/bwma): {:.3}x   l1 miss ratio (rwma/bwma): {:.3}x   outputs match: {}\n",
            self.speedup, self.l1_miss_ratio, self.outputs_match
        ));
        out
    }

    pub fn to_csv(&self) -> Result<String, SimError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "layout",
            "total_cycles",
            "compute_cycles",
            "memory_cycles",
            "l1_misses",
            "l1_miss_rate",
            "l2_misses",
            "gemm_pct",
            "non_gemm_pct",
            "conversion_pct",
            "output_digest",
        ])
        .map_err(csv_err)?;
        for r in [&self.rwma, &self.bwma] {
            w.write_record([
                r.config.layout.clone(),
                r.total_cycles.to_string(),
                r.compute_cycles.to_string(),
                r.memory_cycles.to_string(),
                r.l1.misses.to_string(),
                format!("{:.6}", r.l1.miss_rate),
                r.l2.misses.to_string(),
                format!("{:.3}", r.shares.gemm_pct),
                format!("{:.3}", r.shares.non_gemm_pct),
                format!("{:.3}", r.shares.conversion_pct),
                r.output_digest.clone(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| SimError::Config(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| SimError::Config(e.to_string()))
    }
}

/// One cell of a configuration sweep: both layouts at a given kernel size,
/// accelerator kind and core count.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub kernel_size: usize,
    pub accelerator: String,
    pub cores: usize,
    pub rwma_cycles: u64,
    pub bwma_cycles: u64,
    pub speedup: f64,
    pub rwma_l1_miss_rate: f64,
    pub bwma_l1_miss_rate: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_csv(&self) -> Result<String, SimError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "kernel_size",
            "accelerator",
            "cores",
            "rwma_cycles",
            "bwma_cycles",
            "speedup",
            "rwma_l1_miss_rate",
            "bwma_l1_miss_rate",
        ])
        .map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                r.kernel_size.to_string(),
                r.accelerator.clone(),
                r.cores.to_string(),
                r.rwma_cycles.to_string(),
                r.bwma_cycles.to_string(),
                format!("{:.4}", r.speedup),
                format!("{:.6}", r.rwma_l1_miss_rate),
                format!("{:.6}", r.bwma_l1_miss_rate),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| SimError::Config(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| SimError::Config(e.to_string()))
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:>11} {:>6} {:>6} {:>16} {:>16} {:>9} {:>13} {:>13}\n",
            "kernel_size", "accel", "cores", "rwma_cycles", "bwma_cycles", "speedup", "rwma_l1_miss", "bwma_l1_miss"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:>11} {:>6} {:>6} {:>16} {:>16} {:>8.3}x {:>12.3}% {:>12.3}%\n",
                r.kernel_size,
                r.accelerator,
                r.cores,
                r.rwma_cycles,
                r.bwma_cycles,
                r.speedup,
                100.0 * r.rwma_l1_miss_rate,
                100.0 * r.bwma_l1_miss_rate,
            ));
        }
        out
    }
}
