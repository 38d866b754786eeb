//! CSV artifacts of a run and the manifest describing them.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use crate::conformal::format_full;
use crate::episodic::{EpisodeRecord, RunReport, Termination};
use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::manifest::{config_hash, file_checksum, now_unix, RunManifest};
use crate::radius_update::Branch;

pub const EPISODES_HEADER: [&str; 12] = [
    "j",
    "r",
    "q",
    "alpha_bar",
    "kappa_raw",
    "kappa_used",
    "cost",
    "tube_coverage",
    "safety_coverage",
    "dr",
    "dpi",
    "feasible",
];

pub const PANEL_FILES: [&str; 4] = [
    "panel_radius.csv",
    "panel_cost.csv",
    "panel_tube_coverage.csv",
    "panel_safety_coverage.csv",
];

fn writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(BufWriter::new(f)))
}

fn write_rows<I>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = writer(path)?;
    w.write_record(header).map_err(|e| Error::csv(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map(format_full).unwrap_or_default()
}

fn branch_name(b: Branch) -> &'static str {
    match b {
        Branch::Shrinkage => "shrinkage",
        Branch::Expansion => "expansion",
        Branch::Bisection => "bisection",
    }
}

pub fn episode_row(r: &EpisodeRecord) -> Vec<String> {
    vec![
        r.j.to_string(),
        format_full(r.r),
        format_full(r.q),
        format_full(r.alpha_bar),
        format_full(r.kappa_raw),
        format_full(r.kappa_used),
        format_full(r.cost),
        format_full(r.tube_coverage),
        format_full(r.safety_coverage),
        format_full(r.dr),
        format_full(r.dpi),
        r.feasible.to_string(),
    ]
}

pub fn termination_label(t: &Termination) -> String {
    match t {
        Termination::Converged => "converged".into(),
        Termination::MaxEpisodes => "max_episodes".into(),
        Termination::Aborted(why) => format!("aborted: {why}"),
    }
}

/// Write every artifact of one run into `dir` and return the paths, the
/// manifest last.
pub fn write_outputs(report: &RunReport, cfg: &ExperimentConfig, dir: &Path, dump_scores: bool) -> Result<Vec<PathBuf>> {
    if report.records.is_empty() {
        return Err(Error::InvalidArgument("no episodes to write".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let recs = &report.records;
    let target = format_full(1.0 - cfg.run.alpha);
    let mut written = Vec::new();

    let path = dir.join("episodes.csv");
    write_rows(&path, &EPISODES_HEADER, recs.iter().map(episode_row))?;
    written.push(path);

    let path = dir.join("sensitivity.csv");
    write_rows(
        &path,
        &["j", "beta_t", "l_u", "kappa_raw", "kappa_used", "r_next", "branch", "projected", "probes"],
        recs.iter().map(|r| {
            vec![
                r.j.to_string(),
                opt(r.beta_t),
                opt(r.l_u),
                format_full(r.kappa_raw),
                format_full(r.kappa_used),
                format_full(r.r_next),
                branch_name(r.branch).to_string(),
                r.projected.to_string(),
                r.probes.to_string(),
            ]
        }),
    )?;
    written.push(path);

    let panels: [(&str, &[&str], fn(&EpisodeRecord) -> f64, bool); 4] = [
        (PANEL_FILES[0], &["j", "r"], |r| r.r, false),
        (PANEL_FILES[1], &["j", "cost"], |r| r.cost, false),
        (PANEL_FILES[2], &["j", "tube_coverage", "target"], |r| r.tube_coverage, true),
        (PANEL_FILES[3], &["j", "safety_coverage", "target"], |r| r.safety_coverage, true),
    ];
    for (name, header, field, with_target) in panels {
        let path = dir.join(name);
        write_rows(
            &path,
            header,
            recs.iter().map(|r| {
                let mut row = vec![r.j.to_string(), format_full(field(r))];
                if with_target {
                    row.push(target.clone());
                }
                row
            }),
        )?;
        written.push(path);
    }

    if dump_scores {
        for r in recs {
            let path = dir.join(format!("scores_j{}.csv", r.j));
            r.scores.write_csv_file(&path)?;
            written.push(path);
        }
    }

    let mut files = std::collections::BTreeMap::new();
    for p in &written {
        let name = p.file_name().expect("file path").to_string_lossy().into_owned();
        files.insert(name, file_checksum(p)?);
    }
    let manifest = RunManifest {
        artifact_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: config_hash(cfg)?,
        seeds: cfg.run.seeds,
        created_unix: now_unix(),
        termination: termination_label(&report.termination),
        episodes: recs.len(),
        files,
    };
    let path = dir.join("manifest.toml");
    manifest.write(&path)?;
    written.push(path);
    Ok(written)
}
