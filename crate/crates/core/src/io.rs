//! Point cloud, label, trajectory and grid file formats.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::grid::{OccupancyGrid, VoxelData, VoxelKey};
use crate::scan::{ClassId, Scan, UNLABELED};
use crate::se3::{Mat3, Moments, Pose, Vec3};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed file: {msg}")]
    MalformedFile { path: String, msg: String },
    #[error("{path}: expected {expected} label records, found {found}")]
    CountMismatch {
        path: String,
        expected: usize,
        found: usize,
    },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, IoError> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(io_err(path))?;
    Ok(buf)
}

/// `%.9g`-style formatting: nine significant digits, trailing zeros
/// stripped, exponent form outside `[1e-5, 1e9)`.
pub fn fmt_g9(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-5..9).contains(&exp) {
        let m = trim_fraction(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (8 - exp) as usize;
        trim_fraction(&format!("{x:.decimals$}")).to_string()
    }
}

fn trim_fraction(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Decodes 16-byte little-endian `(x, y, z, intensity)` records.
pub fn parse_point_cloud_bin(bytes: &[u8]) -> Option<Scan> {
    if bytes.len() % 16 != 0 {
        return None;
    }
    let f = |b: &[u8]| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
    let points = bytes
        .chunks_exact(16)
        .map(|r| Vec3::new(f(&r[0..4]), f(&r[4..8]), f(&r[8..12])))
        .collect();
    Some(Scan::from_points(points))
}

pub fn read_point_cloud_bin(path: &Path) -> Result<Scan, IoError> {
    let bytes = read_bytes(path)?;
    parse_point_cloud_bin(&bytes).ok_or_else(|| IoError::MalformedFile {
        path: path.display().to_string(),
        msg: format!("size {} is not a multiple of 16 bytes", bytes.len()),
    })
}

/// Writes points as `f32` records with zero intensity.
pub fn write_point_cloud_bin(path: &Path, scan: &Scan) -> Result<(), IoError> {
    let mut buf = Vec::with_capacity(scan.len() * 16);
    for p in scan.points() {
        for v in [p.x as f32, p.y as f32, p.z as f32, 0.0] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(io_err(path))
}

/// Maps raw label ids to class ids. Unknown raw ids become unlabeled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pairs: Vec<(u32, ClassId)>,
    identity: bool,
}

impl LabelMap {
    /// Raw ids pass through unchanged (after masking to 16 bits).
    pub fn identity() -> Self {
        Self {
            pairs: Vec::new(),
            identity: true,
        }
    }

    /// The usual raw-to-training mapping of the 20-class driving scheme.
    /// Moving-object raw ids fold into their static counterparts.
    pub fn semantic_kitti() -> Self {
        let pairs = vec![
            (0, 0),
            (1, 0),
            (10, 1),
            (11, 2),
            (13, 5),
            (15, 3),
            (16, 5),
            (18, 4),
            (20, 5),
            (30, 6),
            (31, 7),
            (32, 8),
            (40, 9),
            (44, 10),
            (48, 11),
            (49, 12),
            (50, 13),
            (51, 14),
            (52, 0),
            (60, 9),
            (70, 15),
            (71, 16),
            (72, 17),
            (80, 18),
            (81, 19),
            (99, 0),
            (252, 1),
            (253, 7),
            (254, 6),
            (255, 8),
            (256, 5),
            (257, 5),
            (258, 4),
            (259, 5),
        ];
        Self {
            pairs,
            identity: false,
        }
    }

    pub fn from_pairs(pairs: Vec<(u32, ClassId)>) -> Self {
        Self {
            pairs,
            identity: false,
        }
    }

    pub fn class_of(&self, record: u32) -> ClassId {
        let raw = record & 0xFFFF;
        if self.identity {
            return raw as ClassId;
        }
        self.pairs
            .iter()
            .find(|(r, _)| *r == raw)
            .map_or(UNLABELED, |(_, c)| *c)
    }

    /// Smallest raw id mapping to `class`, used when writing label files.
    pub fn raw_of(&self, class: ClassId) -> u32 {
        if self.identity {
            return u32::from(class);
        }
        self.pairs
            .iter()
            .filter(|(_, c)| *c == class)
            .map(|(r, _)| *r)
            .min()
            .unwrap_or(0)
    }
}

impl std::str::FromStr for LabelMap {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "semantic-kitti" | "kitti" => Ok(Self::semantic_kitti()),
            "identity" => Ok(Self::identity()),
            other => Err(format!("unknown label map '{other}' (semantic-kitti|identity)")),
        }
    }
}

pub fn read_labels(path: &Path, point_count: usize, map: &LabelMap) -> Result<Vec<ClassId>, IoError> {
    let bytes = read_bytes(path)?;
    if bytes.len() % 4 != 0 || bytes.len() / 4 != point_count {
        return Err(IoError::CountMismatch {
            path: path.display().to_string(),
            expected: point_count,
            found: bytes.len() / 4,
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| map.class_of(u32::from_le_bytes([b[0], b[1], b[2], b[3]])))
        .collect())
}

pub fn write_labels(path: &Path, classes: &[ClassId], map: &LabelMap) -> Result<(), IoError> {
    let mut buf = Vec::with_capacity(classes.len() * 4);
    for &c in classes {
        buf.extend_from_slice(&map.raw_of(c).to_le_bytes());
    }
    fs::write(path, buf).map_err(io_err(path))
}

pub fn format_pose_line(p: &Pose) -> String {
    p.to_row_major_3x4()
        .iter()
        .map(|v| fmt_g9(*v))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn parse_pose_line(line: &str) -> Result<Pose, String> {
    let vals: Vec<f64> = line
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|e| format!("bad number '{t}': {e}")))
        .collect::<Result<_, _>>()?;
    let arr: [f64; 12] = vals
        .try_into()
        .map_err(|v: Vec<f64>| format!("expected 12 values, found {}", v.len()))?;
    if arr.iter().any(|v| !v.is_finite()) {
        return Err("non-finite value".into());
    }
    Ok(Pose::from_row_major_3x4(&arr))
}

pub fn write_trajectory_kitti(path: &Path, poses: &[Pose]) -> Result<(), IoError> {
    let mut out = String::new();
    for p in poses {
        out.push_str(&format_pose_line(p));
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

/// Reads one pose per nonempty line.
pub fn read_trajectory_kitti(path: &Path) -> Result<Vec<Pose>, IoError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut poses = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        poses.push(parse_pose_line(&line).map_err(|msg| IoError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg,
        })?);
    }
    Ok(poses)
}

/// Writes the text grid dump, one voxel per line in ascending key order.
pub fn write_grid<W: Write>(mut w: W, grid: &OccupancyGrid) -> std::io::Result<()> {
    writeln!(
        w,
        "# socc-grid v1 voxel_size={} classes={}",
        fmt_g9(grid.voxel_size()),
        grid.config().class_count()
    )?;
    let mut line = String::new();
    for (k, v) in grid.sorted_cells() {
        line.clear();
        let m = v.moments();
        let s = m.scatter();
        let mu = m.mean();
        let a = v.anchor();
        write!(line, "{} {} {} {}", k.x, k.y, k.z, m.count()).unwrap();
        let vals = [
            mu.x, mu.y, mu.z, s[(0, 0)], s[(0, 1)], s[(0, 2)], s[(1, 1)], s[(1, 2)], s[(2, 2)], a.x, a.y, a.z,
            v.log_odds(),
        ];
        for x in vals {
            write!(line, " {}", fmt_g9(x)).unwrap();
        }
        write!(line, " {}", v.label()).unwrap();
        for p in v.class_probs() {
            write!(line, " {}", fmt_g9(*p)).unwrap();
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn write_grid_file(path: &Path, grid: &OccupancyGrid) -> Result<(), IoError> {
    let f = fs::File::create(path).map_err(io_err(path))?;
    let mut w = std::io::BufWriter::new(f);
    write_grid(&mut w, grid)
        .and_then(|_| w.flush())
        .map_err(io_err(path))
}

/// Reads a grid dump into a grid built from `template`'s mapping settings.
/// The voxel size and class count come from the header.
pub fn read_grid(text: &str, template: &crate::grid::MappingConfig) -> Result<OccupancyGrid, String> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or("empty grid file")?;
    let rest = header
        .strip_prefix("# socc-grid v1 ")
        .ok_or("missing '# socc-grid v1' header")?;
    let mut voxel_size = None;
    let mut classes = None;
    for tok in rest.split_whitespace() {
        match tok.split_once('=') {
            Some(("voxel_size", v)) => voxel_size = v.parse::<f64>().ok(),
            Some(("classes", v)) => classes = v.parse::<usize>().ok(),
            _ => return Err(format!("unexpected header token '{tok}'")),
        }
    }
    let voxel_size = voxel_size.ok_or("header lacks voxel_size")?;
    let classes = classes.ok_or("header lacks classes")?;
    let mut cfg = template.clone();
    cfg.voxel_size = voxel_size;
    cfg.p_hit.resize(classes, *template.p_hit.last().unwrap_or(&0.55));
    cfg.p_miss.resize(classes, *template.p_miss.last().unwrap_or(&0.49));
    let mut grid = OccupancyGrid::new(cfg).map_err(|e| e.to_string())?;
    for (i, line) in lines {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |m: &str| format!("line {}: {m}", i + 1);
        let t: Vec<&str> = line.split_whitespace().collect();
        if t.len() != 18 + classes {
            return Err(err(&format!("expected {} fields, found {}", 18 + classes, t.len())));
        }
        let int = |s: &str| s.parse::<i32>().map_err(|_| err(&format!("bad integer '{s}'")));
        let num = |s: &str| s.parse::<f64>().map_err(|_| err(&format!("bad number '{s}'")));
        let key = VoxelKey::new(int(t[0])?, int(t[1])?, int(t[2])?);
        let count: u64 = t[3].parse().map_err(|_| err("bad count"))?;
        let f: Vec<f64> = t[4..17].iter().map(|s| num(s)).collect::<Result<_, _>>()?;
        let scatter = Mat3::new(f[3], f[4], f[5], f[4], f[6], f[7], f[5], f[7], f[8]);
        let moments = Moments::from_parts(count, Vec3::new(f[0], f[1], f[2]), scatter);
        let probs: Vec<f64> = t[18..].iter().map(|s| num(s)).collect::<Result<_, _>>()?;
        grid.insert_raw(
            key,
            VoxelData::from_raw(moments, Vec3::new(f[9], f[10], f[11]), f[12], probs),
        );
    }
    Ok(grid)
}

/// KITTI-style sequence directory: `velodyne/*.bin`, optional
/// `labels/*.label` and optional `poses.txt`. Frames are ordered by file
/// name.
#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    stems: Vec<String>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self, IoError> {
        let velo = root.join("velodyne");
        let mut stems = Vec::new();
        for entry in fs::read_dir(&velo).map_err(io_err(&velo))? {
            let path = entry.map_err(io_err(&velo))?.path();
            if path.extension().is_some_and(|e| e == "bin") {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    stems.push(stem.to_string());
                }
            }
        }
        if stems.is_empty() {
            return Err(IoError::MalformedFile {
                path: velo.display().to_string(),
                msg: "no .bin scans".into(),
            });
        }
        stems.sort();
        Ok(Self {
            root: root.to_path_buf(),
            stems,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.stems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stems.is_empty()
    }

    /// Scan `i` with labels read from `labels` (a directory of `.label`
    /// files named like the scans), or unlabeled.
    pub fn load(&self, i: usize, labels: Option<(&Path, &LabelMap)>) -> Result<Scan, IoError> {
        let stem = &self.stems[i];
        let scan = read_point_cloud_bin(&self.root.join("velodyne").join(format!("{stem}.bin")))?;
        match labels {
            Some((dir, map)) => {
                let mut scan = scan;
                let classes = read_labels(&dir.join(format!("{stem}.label")), scan.len(), map)?;
                scan.set_classes(classes).expect("label count checked on read");
                Ok(scan)
            }
            None => Ok(scan),
        }
    }

    /// `labels/` under the root, if present.
    pub fn default_labels_dir(&self) -> Option<PathBuf> {
        let dir = self.root.join("labels");
        dir.is_dir().then_some(dir)
    }

    /// Ground truth from `poses.txt` under the root, if present.
    pub fn ground_truth(&self) -> Option<Result<Vec<Pose>, IoError>> {
        let path = self.root.join("poses.txt");
        path.is_file().then(|| read_trajectory_kitti(&path))
    }
}
