//! Binary and CSV artifact formats.
//!
//! Binary files are little-endian: a four-byte magic, a `u32` version, a
//! small header of dimensions, then raw `f64` payload.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::attribution::AttributionMatrix;
use crate::ekfac::{EkfacState, LayerFactors};
use crate::error::{Error, Result};
use crate::ihvp::SolveTrace;
use crate::linalg::DenseMatrix;
use crate::model::MlpSpec;
use crate::trainer::{Checkpoint, Trajectory};

pub const VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &[u8; 4] = b"ASTK";
const EKFAC_MAGIC: &[u8; 4] = b"EKFC";
const ATTR_MAGIC: &[u8; 4] = b"ATTR";
pub const TRAJECTORY_MANIFEST: &str = "trajectory.csv";

struct Writer<W: Write>(W);

impl<W: Write> Writer<W> {
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v)
            .map_err(|_| Error::invalid(format!("{v} does not fit in a u32 header field")))?;
        self.0.write_all(&v.to_le_bytes())?;
        Ok(())
    }

    fn u64(&mut self, v: u64) -> Result<()> {
        self.0.write_all(&v.to_le_bytes())?;
        Ok(())
    }

    fn floats(&mut self, v: &[f64]) -> Result<()> {
        for x in v {
            self.0.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        self.0.write_all(magic)?;
        self.u32(VERSION as usize)
    }
}

struct Reader<R: Read> {
    inner: R,
    what: &'static str,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::UnexpectedEof => self.format("file is truncated"),
                _ => Error::Io(e),
            })?;
        Ok(buf)
    }

    fn format(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            what: self.what,
            detail: detail.into(),
        }
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.bytes()?) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n)
            .map(|_| Ok(f64::from_le_bytes(self.bytes()?)))
            .collect()
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<DenseMatrix> {
        DenseMatrix::from_vec(rows, cols, self.floats(rows * cols)?)
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got: [u8; 4] = self.bytes()?;
        if &got != magic {
            return Err(self.format(format!("bad magic {:?}", String::from_utf8_lossy(&got))));
        }
        let version = self.u32()?;
        if version != VERSION as usize {
            return Err(self.format(format!("unsupported version {version}")));
        }
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        let mut rest = [0u8; 1];
        match self.inner.read(&mut rest)? {
            0 => Ok(()),
            _ => Err(self.format("trailing bytes after payload")),
        }
    }
}

fn create(path: &Path) -> Result<Writer<BufWriter<fs::File>>> {
    Ok(Writer(BufWriter::new(fs::File::create(path)?)))
}

fn open(path: &Path, what: &'static str) -> Result<Reader<BufReader<fs::File>>> {
    Ok(Reader {
        inner: BufReader::new(fs::File::open(path)?),
        what,
    })
}

fn check_shapes(spec: &MlpSpec, shapes: &[(usize, usize)], what: &'static str) -> Result<()> {
    if shapes != spec.layout().shapes() {
        return Err(Error::Format {
            what,
            detail: format!(
                "layer shapes {shapes:?} do not match the network {:?}",
                spec.layout().shapes()
            ),
        });
    }
    Ok(())
}

pub fn write_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let mut w = create(path)?;
    w.header(CHECKPOINT_MAGIC)?;
    let layout = checkpoint.params.layout();
    w.u32(layout.num_layers())?;
    for &(r, c) in layout.shapes() {
        w.u32(r)?;
        w.u32(c)?;
    }
    w.u64(checkpoint.step as u64)?;
    w.floats(checkpoint.params.as_slice())?;
    w.0.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path, spec: &MlpSpec) -> Result<Checkpoint> {
    let mut r = open(path, "checkpoint")?;
    r.header(CHECKPOINT_MAGIC)?;
    let layers = r.u32()?;
    let shapes = (0..layers)
        .map(|_| Ok((r.u32()?, r.u32()?)))
        .collect::<Result<Vec<_>>>()?;
    check_shapes(spec, &shapes, "checkpoint")?;
    let step = r.u64()? as usize;
    let params = spec.params_from_vec(r.floats(spec.num_params())?)?;
    r.finish()?;
    Ok(Checkpoint { step, params })
}

pub fn checkpoint_file_name(step: usize) -> String {
    format!("ckpt_{step:08}.astk")
}

/// One checkpoint file per stored step plus `trajectory.csv` with the
/// learning rate and mini-batch loss of every step.
pub fn write_trajectory(dir: &Path, trajectory: &Trajectory) -> Result<()> {
    fs::create_dir_all(dir)?;
    for c in &trajectory.checkpoints {
        write_checkpoint(&dir.join(checkpoint_file_name(c.step)), c)?;
    }
    let path = dir.join(TRAJECTORY_MANIFEST);
    let csv_err = |source| Error::Csv {
        path: path.clone(),
        source,
    };
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    w.write_record(["step", "lr", "loss"]).map_err(csv_err)?;
    for (i, (lr, loss)) in trajectory.lrs.iter().zip(&trajectory.losses).enumerate() {
        w.write_record([(i + 1).to_string(), lr.to_string(), loss.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectory(dir: &Path, spec: &MlpSpec) -> Result<Trajectory> {
    let path = dir.join(TRAJECTORY_MANIFEST);
    let csv_err = |source| Error::Csv {
        path: path.clone(),
        source,
    };
    let mut rdr = csv::Reader::from_path(&path).map_err(csv_err)?;
    let (mut lrs, mut losses) = (Vec::new(), Vec::new());
    for (i, rec) in rdr.deserialize::<(usize, f64, f64)>().enumerate() {
        let (step, lr, loss) = rec.map_err(csv_err)?;
        if step != i + 1 {
            return Err(Error::Format {
                what: "trajectory manifest",
                detail: format!("row {} has step {step}", i + 1),
            });
        }
        lrs.push(lr);
        losses.push(loss);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "astk"))
        .collect();
    files.sort();
    let checkpoints = files
        .iter()
        .map(|p| read_checkpoint(p, spec))
        .collect::<Result<Vec<_>>>()?;
    let steps: Vec<usize> = checkpoints.iter().map(|c| c.step).collect();
    if steps.first() != Some(&0)
        || steps.last() != Some(&lrs.len())
        || steps.windows(2).any(|w| w[0] >= w[1])
    {
        return Err(Error::Format {
            what: "trajectory",
            detail: format!(
                "checkpoint steps {steps:?} for {} recorded steps",
                lrs.len()
            ),
        });
    }
    Ok(Trajectory {
        checkpoints,
        lrs,
        losses,
    })
}

pub fn write_ekfac(path: &Path, state: &EkfacState) -> Result<()> {
    let mut w = create(path)?;
    w.header(EKFAC_MAGIC)?;
    let shapes = state.layout().shapes();
    w.u32(shapes.len())?;
    for &(r, c) in shapes {
        w.u32(r)?;
        w.u32(c)?;
    }
    for f in state.layers() {
        w.floats(f.q_a.as_slice())?;
        w.floats(&f.d_a)?;
        w.floats(f.q_s.as_slice())?;
        w.floats(&f.d_s)?;
        w.floats(f.lambda.as_slice())?;
    }
    w.0.flush()?;
    Ok(())
}

pub fn read_ekfac(path: &Path, spec: &MlpSpec) -> Result<EkfacState> {
    let mut r = open(path, "curvature state")?;
    r.header(EKFAC_MAGIC)?;
    let layers = r.u32()?;
    let shapes = (0..layers)
        .map(|_| Ok((r.u32()?, r.u32()?)))
        .collect::<Result<Vec<_>>>()?;
    check_shapes(spec, &shapes, "curvature state")?;
    let factors = shapes
        .iter()
        .map(|&(o, i1)| {
            Ok(LayerFactors {
                q_a: r.matrix(i1, i1)?,
                d_a: r.floats(i1)?,
                q_s: r.matrix(o, o)?,
                d_s: r.floats(o)?,
                lambda: r.matrix(o, i1)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    EkfacState::from_layers(spec.layout().clone(), factors)
}

/// `ATTR | version | u32 rows | u32 cols | f64 scores`. Method and seeds live in the CSV.
pub fn write_attribution(path: &Path, m: &AttributionMatrix) -> Result<()> {
    let mut w = create(path)?;
    w.header(ATTR_MAGIC)?;
    w.u32(m.num_queries())?;
    w.u32(m.num_train())?;
    w.floats(m.as_slice())?;
    w.0.flush()?;
    Ok(())
}

pub fn read_attribution(
    path: &Path,
    method: impl Into<String>,
    seeds: Vec<u64>,
) -> Result<AttributionMatrix> {
    let mut r = open(path, "attribution grid")?;
    r.header(ATTR_MAGIC)?;
    let rows = r.u32()?;
    let cols = r.u32()?;
    let scores = r.floats(rows * cols)?;
    r.finish()?;
    AttributionMatrix::new(method, seeds, rows, cols, scores)
}

/// CSV `iteration,objective,lr,wall_time_ms`.
pub fn write_solve_trace(path: &Path, trace: &SolveTrace) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["iteration", "objective", "lr", "wall_time_ms"])
        .map_err(csv_err)?;
    for p in &trace.points {
        w.write_record([
            p.iteration.to_string(),
            p.objective.to_string(),
            p.lr.to_string(),
            p.wall_time_ms.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
