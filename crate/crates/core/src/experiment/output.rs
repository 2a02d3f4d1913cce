//! CSV and TOML artifacts of a run. Everything is written in a fixed order
//! with fixed number formatting, so identical runs give identical bytes.

use std::fs;
use std::path::{Path, PathBuf};

use super::{svg, RunResult, Section, TestLabel};
use crate::analysis::{FeedbackKind, SweepRow};
use crate::error::{Error, Result};
use crate::sim::ControlledTrajectory;

pub const COSTS_HEADER: [&str; 10] = [
    "experiment",
    "ell",
    "test_param_id",
    "test_param",
    "feedback",
    "convention",
    "tracking_cost",
    "control_cost",
    "terminal_cost",
    "total_cost",
];
pub const TRAJECTORY_HEADER: [&str; 4] = ["t", "component", "value", "series_id"];
pub const GAPS_HEADER: [&str; 11] = [
    "experiment",
    "ell",
    "test_param_id",
    "test_param",
    "gap_kind",
    "left_cost",
    "right_cost",
    "gap",
    "delta_a_norm",
    "state_gap",
    "control_gap",
];
pub const FIELD_HEADER: [&str; 5] = ["set", "draw", "ell", "s", "value"];

/// Marker written in place of numbers for rows whose run failed.
pub const ERROR_MARKER: &str = "error";

/// 17 significant digits: enough to round-trip every `f64`. Negative zero
/// is written as zero.
pub fn num(x: f64) -> String {
    format!("{:.16e}", x + 0.0)
}

/// Largest number of state components drawn per run; wider states are
/// subsampled evenly.
const MAX_COMPONENTS: usize = 5;

pub(crate) fn shown_components(n: usize) -> Vec<usize> {
    if n <= MAX_COMPONENTS + 3 {
        return (0..n).collect();
    }
    (0..MAX_COMPONENTS)
        .map(|j| j * (n - 1) / (MAX_COMPONENTS - 1))
        .collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::InvalidInput(format!("{}: {other:?}", path.display())),
    }
}

struct Table {
    path: PathBuf,
    writer: csv::Writer<fs::File>,
}

impl Table {
    fn create(path: PathBuf, header: &[&str]) -> Result<Self> {
        let mut writer = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
        writer.write_record(header).map_err(|e| csv_error(&path, e))?;
        Ok(Self { path, writer })
    }

    fn row<I, T>(&mut self, fields: I) -> Result<()>
    where
        I: IntoIterator<Item = T>,
        T: AsRef<[u8]>,
    {
        self.writer.write_record(fields).map_err(|e| csv_error(&self.path, e))
    }

    fn finish(mut self) -> Result<()> {
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn test_columns(section: &Section, row: &SweepRow) -> (String, String) {
    match section.test_label {
        TestLabel::Value => (
            row.test_id.to_string(),
            row.test_param.iter().map(|v| num(*v)).collect::<Vec<_>>().join(";"),
        ),
        TestLabel::Draw { first } => (row.test_id.to_string(), (first + row.test_id as u64).to_string()),
    }
}

fn convention_column(kind: FeedbackKind) -> &'static str {
    kind.convention().map(|c| c.as_str()).unwrap_or("")
}

pub fn write_costs(sections: &[Section], path: PathBuf) -> Result<()> {
    let mut table = Table::create(path, &COSTS_HEADER)?;
    for section in sections {
        for row in section.table.rows.values() {
            let (id, param) = test_columns(section, row);
            let mut fields = vec![
                section.name.clone(),
                num(row.ell),
                id,
                param,
                row.feedback.label().to_string(),
                convention_column(row.feedback).to_string(),
            ];
            match &row.result {
                Ok(d) => fields.extend([d.cost.tracking, d.cost.control, d.cost.terminal, d.cost.total].map(num)),
                Err(_) => fields.extend(std::iter::repeat_n(ERROR_MARKER.to_string(), 4)),
            }
            table.row(&fields)?;
        }
    }
    table.finish()
}

pub fn write_gaps(sections: &[Section], path: PathBuf) -> Result<()> {
    let mut table = Table::create(path, &GAPS_HEADER)?;
    for section in sections {
        for row in section.table.rows.values() {
            let Ok(data) = &row.result else { continue };
            let Some(gaps) = &data.gaps else { continue };
            let (id, param) = test_columns(section, row);
            for (kind, g) in [
                ("ensemble-vs-lifted", &gaps.ensemble_vs_lifted),
                ("single-vs-applied", &gaps.single_vs_applied),
            ] {
                let mut fields = vec![
                    section.name.clone(),
                    num(row.ell),
                    id.clone(),
                    param.clone(),
                    kind.to_string(),
                ];
                fields.extend([g.left, g.right, g.gap, g.delta_norm, gaps.state_gap, gaps.control_gap].map(num));
                table.row(&fields)?;
            }
        }
    }
    table.finish()
}

fn series_id(section: &str, ell: f64, test_id: usize, feedback: FeedbackKind) -> String {
    match feedback.convention() {
        Some(c) => format!("{section}/ell={ell}/test={test_id}/{}-{}", feedback.label(), c.as_str()),
        None => format!("{section}/ell={ell}/test={test_id}/{}", feedback.label()),
    }
}

fn write_run(table: &mut Table, id: &str, traj: &ControlledTrajectory, shown: &[usize], every: usize) -> Result<()> {
    let last = traj.states.len() - 1;
    for k in (0..=last).filter(|k| k % every == 0 || *k == last) {
        let t = num(traj.grid.node(k));
        for &j in shown {
            table.row([t.as_str(), &format!("y{j}"), &num(traj.states[k][j]), id])?;
        }
        for (j, u) in traj.controls[k].iter().enumerate() {
            table.row([t.as_str(), &format!("u{j}"), &num(*u), id])?;
        }
    }
    Ok(())
}

pub fn write_trajectories(sections: &[Section], every: usize, path: PathBuf) -> Result<()> {
    let mut table = Table::create(path, &TRAJECTORY_HEADER)?;
    for section in sections {
        let shown = shown_components(section.target.dim());
        let target_id = format!("{}/target", section.name);
        let steps = section.target.grid().steps();
        for k in (0..=steps).filter(|k| k % every == 0 || *k == steps) {
            let t = num(section.target.grid().node(k));
            for &j in &shown {
                table.row([
                    t.as_str(),
                    &format!("y{j}"),
                    &num(section.target.value(k)[j]),
                    &target_id,
                ])?;
            }
        }
        for row in section.table.rows.values() {
            let Ok(data) = &row.result else { continue };
            let Some(traj) = &data.trajectory else { continue };
            let id = series_id(&section.name, row.ell, row.test_id, row.feedback);
            write_run(&mut table, &id, traj, &shown, every)?;
        }
    }
    table.finish()
}

pub fn write_fields(result: &RunResult, path: PathBuf) -> Result<()> {
    let mut table = Table::create(path, &FIELD_HEADER)?;
    for f in &result.fields {
        let (set, draw, ell) = (f.set, f.draw.to_string(), num(f.ell));
        for (s, a) in result.nodes.iter().zip(&f.sample.values) {
            table.row([set, draw.as_str(), ell.as_str(), &num(*s), &num(*a)])?;
        }
    }
    table.finish()
}

/// Run description: the effective configuration, per-section settings,
/// Riccati invariant checks and failed rows.
pub fn metadata(result: &RunResult) -> Result<String> {
    let mut root = toml::Table::new();
    root.insert("experiment".into(), result.kind.as_str().into());
    root.insert("crate_version".into(), env!("CARGO_PKG_VERSION").into());
    // The output location is not part of the run's identity.
    let config = super::ExperimentConfig {
        out_dir: None,
        ..result.config.clone()
    };
    let config = toml::Value::try_from(&config).map_err(|e| Error::Config(e.to_string()))?;
    root.insert("config".into(), config);
    let mut sections = toml::Table::new();
    for s in &result.sections {
        let mut t: toml::Table = s.metadata.iter().map(|(k, v)| (k.clone(), v.clone().into())).collect();
        t.insert("target".into(), format!("{:?}", s.target.provenance()).into());
        let mut inv = toml::Table::new();
        for (li, report) in &s.table.invariants {
            let key = format!("ell={}", s.table.ells[*li]);
            let value: toml::Value = match report {
                Ok(r) => toml::Table::from_iter([
                    ("max_asymmetry".to_string(), r.max_asymmetry.into()),
                    ("min_eigenvalue_ratio".to_string(), r.min_eigenvalue_ratio.into()),
                ])
                .into(),
                Err(e) => e.clone().into(),
            };
            inv.insert(key, value);
        }
        t.insert("riccati_invariants".into(), inv.into());
        let errors: Vec<toml::Value> = s
            .table
            .errors()
            .map(|r| {
                format!(
                    "ell={} test={} {}: {}",
                    r.ell,
                    r.test_id,
                    r.feedback.label(),
                    r.result.as_ref().err().unwrap()
                )
                .into()
            })
            .collect();
        t.insert("errors".into(), errors.into());
        sections.insert(s.name.clone(), t.into());
    }
    root.insert("sections".into(), sections.into());
    let mut conventions = toml::Table::new();
    for c in &result.config.conventions {
        let text = match c.as_str() {
            "unit" => "averaged baseline weights outputs and terminal state like a single known-parameter problem",
            _ => "averaged baseline scales output and terminal weights by 1/N with N the training count",
        };
        conventions.insert(c.clone(), text.into());
    }
    root.insert("conventions".into(), conventions.into());
    toml::to_string(&root).map_err(|e| Error::Config(e.to_string()))
}

/// Writes every artifact of `result` into `dir` and returns the written paths.
pub fn write_outputs(result: &RunResult, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut track = |name: &str| {
        let p = dir.join(name);
        written.push(p.clone());
        p
    };
    write_costs(&result.sections, track("costs.csv"))?;
    write_trajectories(
        &result.sections,
        result.config.trajectory_every,
        track("trajectories.csv"),
    )?;
    write_gaps(&result.sections, track("gaps.csv"))?;
    if !result.fields.is_empty() {
        write_fields(result, track("field-samples.csv"))?;
    }
    let meta_path = track("metadata.toml");
    fs::write(&meta_path, metadata(result)?).map_err(|e| Error::io(&meta_path, e))?;
    if result.config.plots {
        for (name, chart) in svg::charts(result) {
            let p = track(&name);
            fs::write(&p, chart.render()).map_err(|e| Error::io(&p, e))?;
        }
    }
    Ok(written)
}

/// One parsed `costs.csv` record.
#[derive(Debug, Clone, PartialEq)]
pub struct CostRecord {
    pub experiment: String,
    pub ell: f64,
    pub test_param_id: usize,
    pub test_param: String,
    pub feedback: String,
    pub convention: String,
    /// `None` for rows marked as failed.
    pub costs: Option<[f64; 4]>,
}

pub fn read_costs(path: &Path) -> Result<Vec<CostRecord>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.iter().ne(COSTS_HEADER) {
        return Err(Error::InvalidInput(format!(
            "{}: unexpected header {header:?}",
            path.display()
        )));
    }
    let bad = |what: &str| Error::InvalidInput(format!("{}: bad {what}", path.display()));
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let f = |j: usize| rec[j].parse::<f64>();
        let costs = if &rec[6] == ERROR_MARKER {
            None
        } else {
            let mut c = [0.0; 4];
            for (j, slot) in c.iter_mut().enumerate() {
                *slot = f(6 + j).map_err(|_| bad("cost"))?;
            }
            Some(c)
        };
        out.push(CostRecord {
            experiment: rec[0].to_string(),
            ell: f(1).map_err(|_| bad("ell"))?,
            test_param_id: rec[2].parse().map_err(|_| bad("test_param_id"))?,
            test_param: rec[3].to_string(),
            feedback: rec[4].to_string(),
            convention: rec[5].to_string(),
            costs,
        });
    }
    Ok(out)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::experiment::ExperimentConfig;

    #[test]
    fn numbers_round_trip_exactly() {
        for x in [0.1, -4.0, 1.0 / 3.0, 552870.123456789, 1e-300, f64::MAX] {
            assert_eq!(num(x).parse::<f64>().unwrap(), x);
        }
    }

    #[test]
    fn wide_states_are_subsampled_evenly() {
        assert_eq!(shown_components(2), vec![0, 1]);
        assert_eq!(shown_components(101), vec![0, 25, 50, 75, 100]);
    }

    #[test]
    fn empty_table_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("costs.csv");
        write_costs(&[], path.clone()).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), COSTS_HEADER.join(",") + "\n");
        assert!(read_costs(&path).unwrap().is_empty());
    }

    pub(crate) fn small() -> ExperimentConfig {
        let mut cfg = ExperimentConfig {
            steps: 500,
            ..ExperimentConfig::default()
        };
        cfg.oscillator.ells = vec![0.0, 2.0];
        cfg
    }

    #[test]
    fn cost_rows_round_trip_through_csv() {
        let run = crate::experiment::run_oscillator(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_outputs(&run, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("costs.csv")).unwrap();
        assert_eq!(text.lines().next().unwrap(), COSTS_HEADER.join(","));

        let records = read_costs(&dir.path().join("costs.csv")).unwrap();
        let table = &run.sections[0].table;
        assert_eq!(records.len(), table.rows.len());
        for (rec, row) in records.iter().zip(table.rows.values()) {
            let cost = row.result.as_ref().unwrap().cost;
            assert_eq!(
                rec.costs,
                Some([cost.tracking, cost.control, cost.terminal, cost.total])
            );
            assert_eq!(rec.ell, row.ell);
            assert_eq!(rec.test_param.parse::<f64>().unwrap(), row.test_param[0]);
            assert_eq!(rec.feedback, row.feedback.label());
        }
    }

    #[test]
    fn reference_level_has_six_tests_for_each_feedback() {
        let run = crate::experiment::run_oscillator(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_outputs(&run, dir.path()).unwrap();
        let records = read_costs(&dir.path().join("costs.csv")).unwrap();
        for feedback in ["ensemble", "averaged"] {
            let rows: Vec<_> = records
                .iter()
                .filter(|r| r.ell == 2.0 && r.feedback == feedback)
                .collect();
            assert_eq!(rows.len(), 6, "{feedback}");
            assert!(rows
                .iter()
                .all(|r| r.costs.is_some_and(|c| c.iter().all(|x| x.is_finite()))));
        }
    }

    #[test]
    fn failed_rows_are_marked_not_dropped() {
        let mut run = crate::experiment::run_oscillator(&small()).unwrap();
        let row = run.sections[0].table.rows.values_mut().next().unwrap();
        row.result = Err("diverged".into());
        let dir = tempfile::tempdir().unwrap();
        write_outputs(&run, dir.path()).unwrap();
        let records = read_costs(&dir.path().join("costs.csv")).unwrap();
        assert_eq!(records.len(), run.sections[0].table.rows.len());
        assert_eq!(records[0].costs, None);
        let text = fs::read_to_string(dir.path().join("costs.csv")).unwrap();
        assert!(text.lines().nth(1).unwrap().ends_with("error,error,error,error"));
        let meta = fs::read_to_string(dir.path().join("metadata.toml")).unwrap();
        assert!(meta.contains("diverged"));
    }

    #[test]
    fn trajectories_include_target_and_kept_levels_only() {
        let run = crate::experiment::run_oscillator(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_outputs(&run, dir.path()).unwrap();
        let mut reader = csv::Reader::from_path(dir.path().join("trajectories.csv")).unwrap();
        let ids: std::collections::BTreeSet<String> = reader.records().map(|r| r.unwrap()[3].to_string()).collect();
        assert!(ids.contains("oscillator/target"));
        assert!(ids.iter().all(|id| id == "oscillator/target" || id.contains("ell=2/")));
        // 6 tests × 3 feedbacks + target
        assert_eq!(ids.len(), 6 * 3 + 1);
    }
}
