//! Plain-text file formats.
//!
//! A dataset directory holds `manifest.txt` plus three files per pair:
//!
//! ```text
//! pair_0000.matches   x1 y1 x2 y2 side_info [gt_inlier]   (header + one row per match)
//! pair_0000.calib     K1 <9 values, row-major>
//!                     K2 <9 values, row-major>
//! pair_0000.pose      R <9 values, row-major>
//!                     t <3 values>
//! ```
//!
//! The manifest starts with `carsac-dataset 1`, followed by a column header
//! and one `name n inlier_rate noise_sigma_px` line per pair. Numbers are
//! written in shortest round-trip form, so every file reads back exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context, Result};
use carsac_core::geometry::{CameraIntrinsics, Correspondence, RelativePose};
use carsac_core::training::SyntheticPair;
use nalgebra::{Matrix3, Vector2, Vector3};

pub const MANIFEST: &str = "manifest.txt";
pub const MANIFEST_MAGIC: &str = "carsac-dataset 1";
const MANIFEST_HEADER: &str = "name n inlier_rate noise_sigma_px";
const MATCH_COLUMNS: [&str; 6] = ["x1", "y1", "x2", "y2", "side_info", "gt_inlier"];

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

/// Parses a finite number; NaN and infinities are rejected.
fn number(token: &str) -> Result<f64> {
    let v: f64 = token.parse().map_err(|_| anyhow!("invalid number '{token}'"))?;
    ensure!(v.is_finite(), "non-finite number '{token}'");
    Ok(v)
}

fn numbers(tokens: &[&str]) -> Result<Vec<f64>> {
    tokens.iter().map(|t| number(t)).collect()
}

fn push_numbers(out: &mut String, values: impl IntoIterator<Item = f64>) {
    for v in values {
        let _ = write!(out, " {v:?}");
    }
}

fn row_major(m: &Matrix3<f64>) -> [f64; 9] {
    [m[(0, 0)], m[(0, 1)], m[(0, 2)], m[(1, 0)], m[(1, 1)], m[(1, 2)], m[(2, 0)], m[(2, 1)], m[(2, 2)]]
}

pub fn format_matches(data: &[Correspondence]) -> String {
    let labelled = !data.is_empty() && data.iter().all(|c| c.gt_inlier.is_some());
    let mut out = String::new();
    let cols = if labelled { &MATCH_COLUMNS[..] } else { &MATCH_COLUMNS[..5] };
    out.push_str(&cols.join(" "));
    out.push('\n');
    for c in data {
        let _ = write!(out, "{:?} {:?} {:?} {:?} {:?}", c.p1.x, c.p1.y, c.p2.x, c.p2.y, c.side_info);
        if labelled {
            let _ = write!(out, " {}", u8::from(c.gt_inlier == Some(true)));
        }
        out.push('\n');
    }
    out
}

/// Parses a matches file. Errors name the 1-based line.
pub fn parse_matches(text: &str) -> Result<Vec<Correspondence>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| anyhow!("empty matches file"))?;
    let cols: Vec<&str> = header.split_whitespace().collect();
    let labelled = match cols.as_slice() {
        c if c == &MATCH_COLUMNS[..5] => false,
        c if c == &MATCH_COLUMNS[..] => true,
        _ => bail!("line 1: header must be '{}' with optional 'gt_inlier'", MATCH_COLUMNS[..5].join(" ")),
    };
    let mut out = Vec::new();
    for (i, line) in lines {
        let row = || format!("line {}", i + 1);
        let tokens: Vec<&str> = line.split_whitespace().collect();
        ensure!(tokens.len() == cols.len(), "{}: expected {} columns, found {}", row(), cols.len(), tokens.len());
        let v = numbers(&tokens[..5]).with_context(row)?;
        let mut c = Correspondence::new(Vector2::new(v[0], v[1]), Vector2::new(v[2], v[3]), v[4])
            .map_err(|e| anyhow!("{}: {e}", row()))?;
        if labelled {
            c.gt_inlier = Some(match tokens[5] {
                "1" => true,
                "0" => false,
                other => bail!("{}: gt_inlier must be 0 or 1, found '{other}'", row()),
            });
        }
        out.push(c);
    }
    Ok(out)
}

fn intrinsics_from(values: &[f64]) -> Result<CameraIntrinsics> {
    let [fx, s, cx, z1, fy, cy, z2, z3, one] = values else {
        bail!("intrinsic matrix needs 9 values");
    };
    ensure!(*s == 0.0 && *z1 == 0.0 && *z2 == 0.0 && *z3 == 0.0 && *one == 1.0, "intrinsic matrix must be [fx 0 cx; 0 fy cy; 0 0 1]");
    CameraIntrinsics::new(*fx, *fy, *cx, *cy).map_err(|e| anyhow!("{e}"))
}

pub fn format_calib(k1: &CameraIntrinsics, k2: &CameraIntrinsics) -> String {
    let mut out = String::new();
    for (tag, k) in [("K1", k1), ("K2", k2)] {
        out.push_str(tag);
        push_numbers(&mut out, row_major(&k.matrix()));
        out.push('\n');
    }
    out
}

/// Reads the `K1`/`K2` lines of a calibration file.
pub fn parse_calib(text: &str) -> Result<(CameraIntrinsics, CameraIntrinsics)> {
    let mut k1 = None;
    let mut k2 = None;
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        let slot = match tokens[0] {
            "K1" => &mut k1,
            "K2" => &mut k2,
            other => bail!("line {}: unknown record '{other}'", i + 1),
        };
        let k = numbers(&tokens[1..]).and_then(|v| intrinsics_from(&v)).with_context(|| format!("line {}", i + 1))?;
        ensure!(slot.replace(k).is_none(), "line {}: duplicate {}", i + 1, tokens[0]);
    }
    Ok((k1.ok_or_else(|| anyhow!("missing K1"))?, k2.ok_or_else(|| anyhow!("missing K2"))?))
}

pub fn format_pose(pose: &RelativePose) -> String {
    let mut out = String::from("R");
    push_numbers(&mut out, row_major(&pose.rotation));
    out.push_str("\nt");
    push_numbers(&mut out, pose.translation.iter().copied());
    out.push('\n');
    out
}

/// Reads the `R`/`t` lines of a pose file; `t` is normalized to unit length.
pub fn parse_pose(text: &str) -> Result<RelativePose> {
    let mut r = None;
    let mut t = None;
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        let v = numbers(&tokens[1..]).with_context(|| format!("line {}", i + 1))?;
        match (tokens[0], v.len()) {
            ("R", 9) => r = Some(Matrix3::from_row_slice(&v)),
            ("t", 3) => t = Some(Vector3::new(v[0], v[1], v[2])),
            (tag, n) => bail!("line {}: unexpected record '{tag}' with {n} values", i + 1),
        }
    }
    let r = r.ok_or_else(|| anyhow!("missing R"))?;
    let t = t.ok_or_else(|| anyhow!("missing t"))?;
    ensure!((r.transpose() * r - Matrix3::identity()).norm() < 1e-6 && r.determinant() > 0.0, "R is not a rotation");
    ensure!(t.norm() > 0.0, "t must be non-zero");
    Ok(RelativePose::new(r, t))
}

/// Parses `path` with `parse`, prefixing errors with the path.
pub fn load<T>(path: &Path, parse: impl Fn(&str) -> Result<T>) -> Result<T> {
    parse(&read(path)?).with_context(|| path.display().to_string())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub n: usize,
    pub inlier_rate: f64,
    pub noise_sigma_px: f64,
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    let mut out = format!("{MANIFEST_MAGIC}\n{MANIFEST_HEADER}\n");
    for e in entries {
        let _ = writeln!(out, "{} {} {:?} {:?}", e.name, e.n, e.inlier_rate, e.noise_sigma_px);
    }
    out
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    ensure!(lines.next().map(|(_, l)| l.trim()) == Some(MANIFEST_MAGIC), "line 1: expected '{MANIFEST_MAGIC}'");
    ensure!(lines.next().map(|(_, l)| l.trim()) == Some(MANIFEST_HEADER), "line 2: expected '{MANIFEST_HEADER}'");
    lines
        .map(|(i, line)| {
            let tokens: Vec<&str> = line.split_whitespace().collect();
            ensure!(tokens.len() == 4, "line {}: expected 4 columns", i + 1);
            ensure!(
                !tokens[0].contains(['/', '\\']) && tokens[0] != ".." && tokens[0] != ".",
                "line {}: invalid pair name '{}'",
                i + 1,
                tokens[0]
            );
            Ok(ManifestEntry {
                name: tokens[0].to_string(),
                n: tokens[1].parse().map_err(|_| anyhow!("line {}: invalid count '{}'", i + 1, tokens[1]))?,
                inlier_rate: number(tokens[2]).with_context(|| format!("line {}", i + 1))?,
                noise_sigma_px: number(tokens[3]).with_context(|| format!("line {}", i + 1))?,
            })
        })
        .collect()
}

pub struct PairPaths {
    pub matches: PathBuf,
    pub calib: PathBuf,
    pub pose: PathBuf,
}

pub fn pair_paths(dir: &Path, name: &str) -> PairPaths {
    PairPaths {
        matches: dir.join(format!("{name}.matches")),
        calib: dir.join(format!("{name}.calib")),
        pose: dir.join(format!("{name}.pose")),
    }
}

pub fn pair_name(index: usize) -> String {
    format!("pair_{index:04}")
}

/// Writes a dataset directory, creating it if needed.
pub fn save_dataset(dir: &Path, pairs: &[SyntheticPair]) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let mut entries = Vec::with_capacity(pairs.len());
    for (i, pair) in pairs.iter().enumerate() {
        let name = pair_name(i);
        let paths = pair_paths(dir, &name);
        write(&paths.matches, &format_matches(&pair.correspondences))?;
        write(&paths.calib, &format_calib(&pair.k1, &pair.k2))?;
        write(&paths.pose, &format_pose(&pair.pose))?;
        entries.push(ManifestEntry {
            name,
            n: pair.correspondences.len(),
            inlier_rate: pair.inlier_rate,
            noise_sigma_px: pair.noise_sigma_px,
        });
    }
    write(&dir.join(MANIFEST), &format_manifest(&entries))
}

/// Reads every pair listed in the directory's manifest. Pairs must carry
/// ground-truth labels.
pub fn load_dataset(dir: &Path) -> Result<Vec<SyntheticPair>> {
    let manifest = dir.join(MANIFEST);
    ensure!(manifest.is_file(), "dataset manifest {} not found", manifest.display());
    let entries = load(&manifest, parse_manifest)?;
    entries
        .iter()
        .map(|e| {
            let paths = pair_paths(dir, &e.name);
            let correspondences = load(&paths.matches, parse_matches)?;
            ensure!(
                correspondences.len() == e.n,
                "{}: manifest lists {} matches, file has {}",
                paths.matches.display(),
                e.n,
                correspondences.len()
            );
            ensure!(
                correspondences.iter().all(|c| c.gt_inlier.is_some()),
                "{}: training and benchmarking need the gt_inlier column",
                paths.matches.display()
            );
            let (k1, k2) = load(&paths.calib, parse_calib)?;
            let pose = load(&paths.pose, parse_pose)?;
            Ok(SyntheticPair {
                correspondences,
                pose,
                k1,
                k2,
                inlier_rate: e.inlier_rate,
                noise_sigma_px: e.noise_sigma_px,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use carsac_core::training::{generate_synthetic, PairSpec};

    #[test]
    fn files_round_trip_exactly() {
        let pair = generate_synthetic(&PairSpec::default(), 3).unwrap();
        assert_eq!(parse_matches(&format_matches(&pair.correspondences)).unwrap(), pair.correspondences);
        assert_eq!(parse_calib(&format_calib(&pair.k1, &pair.k2)).unwrap(), (pair.k1, pair.k2));
        let pose = parse_pose(&format_pose(&pair.pose)).unwrap();
        assert_eq!(pose.rotation, pair.pose.rotation);
        assert!((pose.translation - pair.pose.translation).norm() < 1e-15);
    }

    #[test]
    fn unlabelled_matches_omit_the_label_column() {
        let mut pair = generate_synthetic(&PairSpec::default(), 4).unwrap();
        for c in pair.correspondences.iter_mut() {
            c.gt_inlier = None;
        }
        let text = format_matches(&pair.correspondences);
        assert!(text.starts_with("x1 y1 x2 y2 side_info\n"));
        assert_eq!(parse_matches(&text).unwrap(), pair.correspondences);
    }

    #[test]
    fn bad_rows_are_reported_with_their_line() {
        let header = "x1 y1 x2 y2 side_info\n";
        for (body, needle) in [
            ("1 2 3 4 0.5\n1 2 3 NaN 0.5\n", "line 3"),
            ("1 2 3 4\n", "line 2: expected 5 columns"),
            ("1 2 3 inf 0.5\n", "non-finite"),
            ("1 2 3 4 1.5\n", "side_info"),
        ] {
            let err = format!("{:#}", parse_matches(&format!("{header}{body}")).unwrap_err());
            assert!(err.contains(needle), "{err}");
        }
        assert!(parse_matches("a b c\n").is_err());
        assert!(parse_matches("x1 y1 x2 y2 side_info gt_inlier\n1 2 3 4 0.5 2\n").is_err());
    }

    #[test]
    fn calibration_and_pose_are_validated() {
        assert!(parse_calib("K1 600 0 320 0 600 240 0 0 1\n").is_err());
        assert!(parse_calib("K1 600 1 320 0 600 240 0 0 1\nK2 600 0 320 0 600 240 0 0 1\n").is_err());
        assert!(parse_pose("R 1 0 0 0 1 0 0 0 1\n").is_err());
        assert!(parse_pose("R 2 0 0 0 1 0 0 0 1\nt 1 0 0\n").is_err());
        let p = parse_pose("R 1 0 0 0 1 0 0 0 1\nt 3 0 4\n").unwrap();
        assert!((p.translation.norm() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn manifest_round_trips_and_rejects_paths() {
        let entries = vec![ManifestEntry {
            name: pair_name(7),
            n: 12,
            inlier_rate: 0.25,
            noise_sigma_px: 0.5,
        }];
        assert_eq!(parse_manifest(&format_manifest(&entries)).unwrap(), entries);
        let bad = format!("{MANIFEST_MAGIC}\n{MANIFEST_HEADER}\n../x 1 0.5 0.5\n");
        assert!(parse_manifest(&bad).is_err());
    }
}
