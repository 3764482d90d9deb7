//! Binary value/region files, `meta.txt` and CSV/PGM emission.
//!
//! Binary layout (little endian): an 8-byte magic, the grid
//! (`r_max n_r s_min s_max n_s n_e n_t k_max`), the schedule
//! (`horizon n_dates m_delay`), the interval count, then per interval the
//! pending count, the step count and the payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use harvest_core::chain::IntervalField;
use harvest_core::solver::IntervalRegions;
use harvest_core::{GridSpec, Region, RegionMap, Schedule, Solution, ValueField};

use crate::CliError;

const FIELD_MAGIC: &[u8; 8] = b"HVFIELD1";
const REGION_MAGIC: &[u8; 8] = b"HVREGN01";

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::io(format!("{}: {e}", path.display()))
}

struct Writer<W: Write>(W);

impl<W: Write> Writer<W> {
    fn u64(&mut self, v: usize) -> std::io::Result<()> {
        self.0.write_all(&(v as u64).to_le_bytes())
    }
    fn f64(&mut self, v: f64) -> std::io::Result<()> {
        self.0.write_all(&v.to_le_bytes())
    }
    fn header(&mut self, magic: &[u8; 8], grid: &GridSpec, schedule: &Schedule, intervals: usize) -> std::io::Result<()> {
        self.0.write_all(magic)?;
        self.f64(grid.r_max)?;
        self.u64(grid.n_r)?;
        self.f64(grid.s_min)?;
        self.f64(grid.s_max)?;
        self.u64(grid.n_s)?;
        self.u64(grid.n_e)?;
        self.u64(grid.n_t)?;
        self.f64(grid.k_max)?;
        self.f64(schedule.horizon)?;
        self.u64(schedule.n_dates)?;
        self.u64(schedule.m_delay)?;
        self.u64(intervals)
    }
}

struct Reader<R: Read>(R);

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> std::io::Result<Vec<u8>> {
        let mut buf = vec![0; n];
        self.0.read_exact(&mut buf)?;
        Ok(buf)
    }
    fn u64(&mut self) -> std::io::Result<usize> {
        let mut b = [0; 8];
        self.0.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b) as usize)
    }
    fn f64(&mut self) -> std::io::Result<f64> {
        let mut b = [0; 8];
        self.0.read_exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }
    fn f64s(&mut self, n: usize) -> std::io::Result<Vec<f64>> {
        Ok(self
            .bytes(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn header(&mut self, magic: &[u8; 8]) -> std::io::Result<Option<(GridSpec, Schedule, usize)>> {
        if &self.bytes(8)?[..] != magic {
            return Ok(None);
        }
        let grid = GridSpec {
            r_max: self.f64()?,
            n_r: self.u64()?,
            s_min: self.f64()?,
            s_max: self.f64()?,
            n_s: self.u64()?,
            n_e: self.u64()?,
            n_t: self.u64()?,
            k_max: self.f64()?,
        };
        let schedule = Schedule::new(self.f64()?, self.u64()?, self.u64()?);
        Ok(Some((grid, schedule, self.u64()?)))
    }
}

pub fn write_field(path: &Path, field: &ValueField) -> Result<(), CliError> {
    let run = || -> std::io::Result<()> {
        let mut w = Writer(BufWriter::new(File::create(path)?));
        w.header(FIELD_MAGIC, &field.grid, &field.schedule, field.intervals.len())?;
        for interval in &field.intervals {
            w.u64(interval.pending_count)?;
            w.u64(interval.layers.len())?;
            for layer in &interval.layers {
                w.u64(layer.len())?;
                for &v in layer {
                    w.f64(v)?;
                }
            }
        }
        w.0.flush()
    };
    run().map_err(|e| io_err(path, e))
}

pub fn read_field(path: &Path) -> Result<ValueField, CliError> {
    let run = || -> std::io::Result<Option<ValueField>> {
        let mut r = Reader(BufReader::new(File::open(path)?));
        let Some((grid, schedule, n)) = r.header(FIELD_MAGIC)? else {
            return Ok(None);
        };
        let mut intervals = Vec::with_capacity(n);
        for _ in 0..n {
            let pending_count = r.u64()?;
            let steps = r.u64()?;
            let mut layers = Vec::with_capacity(steps);
            for _ in 0..steps {
                let len = r.u64()?;
                layers.push(r.f64s(len)?);
            }
            intervals.push(IntervalField { pending_count, layers });
        }
        Ok(Some(ValueField {
            grid,
            schedule,
            intervals,
        }))
    };
    run()
        .map_err(|e| io_err(path, e))?
        .ok_or_else(|| CliError::io(format!("{}: not a value field file", path.display())))
}

pub fn write_regions(path: &Path, regions: &RegionMap) -> Result<(), CliError> {
    let run = || -> std::io::Result<()> {
        let mut w = Writer(BufWriter::new(File::create(path)?));
        w.header(REGION_MAGIC, &regions.grid, &regions.schedule, regions.intervals.len())?;
        for interval in &regions.intervals {
            w.u64(interval.pending_count)?;
            w.u64(interval.labels.len())?;
            for (labels, steps) in interval.labels.iter().zip(&interval.harvest_steps) {
                w.u64(labels.len())?;
                let bytes: Vec<u8> = labels.iter().map(|&l| l as u8).collect();
                w.0.write_all(&bytes)?;
                for &s in steps {
                    w.0.write_all(&s.to_le_bytes())?;
                }
            }
            w.u64(interval.plant_levels.len())?;
            w.0.write_all(&interval.plant_levels)?;
        }
        w.0.flush()
    };
    run().map_err(|e| io_err(path, e))
}

pub fn read_regions(path: &Path) -> Result<RegionMap, CliError> {
    let bad = || CliError::io(format!("{}: not a region map file", path.display()));
    let run = || -> std::io::Result<Option<RegionMap>> {
        let mut r = Reader(BufReader::new(File::open(path)?));
        let Some((grid, schedule, n)) = r.header(REGION_MAGIC)? else {
            return Ok(None);
        };
        let mut intervals = Vec::with_capacity(n);
        for _ in 0..n {
            let pending_count = r.u64()?;
            let steps = r.u64()?;
            let mut labels = Vec::with_capacity(steps);
            let mut harvest_steps = Vec::with_capacity(steps);
            for _ in 0..steps {
                let len = r.u64()?;
                let raw = r.bytes(len)?;
                let Some(decoded) = raw.iter().map(|&b| Region::from_u8(b)).collect::<Option<Vec<_>>>() else {
                    return Ok(None);
                };
                labels.push(decoded);
                harvest_steps.push(
                    r.bytes(2 * len)?
                        .chunks_exact(2)
                        .map(|c| u16::from_le_bytes([c[0], c[1]]))
                        .collect(),
                );
            }
            let len = r.u64()?;
            let plant_levels = r.bytes(len)?;
            intervals.push(IntervalRegions {
                pending_count,
                labels,
                harvest_steps,
                plant_levels,
            });
        }
        Ok(Some(RegionMap {
            grid,
            schedule,
            intervals,
        }))
    };
    run().map_err(|e| io_err(path, e))?.ok_or_else(bad)
}

/// `key: value` lines.
pub fn write_meta(path: &Path, hash: &str, sol: &Solution, warnings: &[String]) -> Result<(), CliError> {
    let g = &sol.field.grid;
    let s = &sol.stats;
    let mut text = String::new();
    let mut kv = |k: &str, v: String| text.push_str(&format!("{k}: {v}\n"));
    kv("config_hash", hash.to_string());
    kv("intervals", sol.field.intervals.len().to_string());
    kv("n_r", g.n_r.to_string());
    kv("n_s", g.n_s.to_string());
    kv("n_e", g.n_e.to_string());
    kv("n_t", g.n_t.to_string());
    kv("s_min", format!("{:.17e}", g.s_min));
    kv("s_max", format!("{:.17e}", g.s_max));
    kv("implicit_steps", s.implicit_steps.to_string());
    kv("policy_iterations", s.policy_iterations.to_string());
    kv("max_policy_iterations", s.max_policy_iterations.to_string());
    kv("relaxation_sweeps", s.relaxation_sweeps.to_string());
    kv("max_continuation_residual", format!("{:.6e}", s.max_continuation_residual));
    kv("clamp_count", s.clamp_count.to_string());
    kv("plant_and_harvest_nodes", sol.regions.plant_and_harvest_count().to_string());
    kv("wall_time_secs", format!("{:.3}", s.wall_time_secs));
    for w in warnings {
        kv("warning", w.clone());
    }
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn read_meta_hash(path: &Path) -> Result<String, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    text.lines()
        .find_map(|l| l.strip_prefix("config_hash: "))
        .map(str::to_string)
        .ok_or_else(|| CliError::io(format!("{}: no config_hash line", path.display())))
}

pub const REGIONS_HEADER: &str = "k,step,e,r,s,label,harvest_amount,plant_amount";

/// Appends the rows of one slice to a `regions.csv` writer.
pub fn write_region_rows<W: Write>(out: &mut W, regions: &RegionMap, k: usize, step: usize, combo: usize) -> std::io::Result<()> {
    let grid = &regions.grid;
    let plant_step = grid.n_t;
    for i_r in 0..grid.n_r {
        for i_s in 0..grid.n_s {
            let node = grid.node(i_r, i_s);
            let mut label = regions.label(k, step, combo, node);
            let plants = regions.label(k, plant_step, combo, node).plants();
            label = match (label.harvests(), plants) {
                (true, true) => Region::PlantAndHarvest,
                (true, false) => Region::Harvest,
                (false, true) => Region::Plant,
                (false, false) => Region::Continue,
            };
            let plant = if plants { regions.plant_amount(k, combo, node) } else { 0.0 };
            writeln!(
                out,
                "{k},{step},{combo},{:.16e},{:.16e},{},{:.16e},{:.16e}",
                grid.r_at(i_r),
                grid.s_at(i_s),
                label.as_str(),
                regions.harvest_amount(k, step, combo, node),
                plant
            )?;
        }
    }
    Ok(())
}

/// Label-coded greyscale image, one byte per node, stock increasing
/// upwards and log-price to the right.
pub fn write_pgm(path: &Path, regions: &RegionMap, k: usize, step: usize, combo: usize) -> Result<(), CliError> {
    let grid = &regions.grid;
    let mut bytes = format!("P5\n{} {}\n255\n", grid.n_s, grid.n_r).into_bytes();
    for i_r in (0..grid.n_r).rev() {
        for i_s in 0..grid.n_s {
            let node = grid.node(i_r, i_s);
            let harvest = regions.label(k, step, combo, node).harvests();
            let plant = regions.label(k, grid.n_t, combo, node).plants();
            bytes.push(match (harvest, plant) {
                (false, false) => 0,
                (true, false) => 255,
                (false, true) => 128,
                (true, true) => 64,
            });
        }
    }
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use harvest_core::solver::solve;
    use harvest_core::{GridOverrides, ModelParams, SolverOptions};

    #[test]
    fn field_and_regions_round_trip() {
        let params = ModelParams::baseline();
        let grid = GridOverrides {
            n_r: Some(11),
            n_s: Some(7),
            n_e: Some(3),
            n_t: Some(3),
            ..Default::default()
        };
        let sol = solve(&params, &grid, &SolverOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("field.bin");
        let r = dir.path().join("regions.bin");
        write_field(&f, &sol.field).unwrap();
        write_regions(&r, &sol.regions).unwrap();
        assert_eq!(read_field(&f).unwrap(), sol.field);
        assert_eq!(read_regions(&r).unwrap(), sol.regions);
        assert!(read_field(&r).is_err());
    }
}
