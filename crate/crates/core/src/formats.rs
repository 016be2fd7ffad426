//! On-disk artifacts: the binary weight container, the dataset file, safety
//! maps (JSON with every tube box, a CSV table, a PGM picture and a timing
//! sidecar) and small helpers for JSON records and provenance hashes.
//!
//! Binary files are little-endian and end with the SHA-256 of everything
//! before the trailer, so truncation and bit flips are detected on load.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::Trajectory;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{Conv, Layer, Network};
use crate::reach::{GridSpec, ReachTube, SafetyMap, Verdict};
use crate::star::{Hyperbox, Shape};
use crate::training::PairedDataset;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"DWMW";
pub const DATASET_MAGIC: &[u8; 4] = b"DWMD";
pub const FORMAT_VERSION: u32 = 1;

/// Free-form provenance (input hashes, seeds, config digests) stored with an artifact.
pub type Provenance = BTreeMap<String, String>;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

fn malformed<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u64).to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len());
        self.0.extend_from_slice(b);
    }
    fn shape(&mut self, s: Shape) {
        match s {
            Shape::Flat(n) => {
                self.u8(0);
                self.u64(n);
            }
            Shape::Image { channels, height, width } => {
                self.u8(1);
                self.u64(channels);
                self.u64(height);
                self.u64(width);
            }
        }
    }
    /// Appends the SHA-256 trailer.
    fn finish(mut self) -> Vec<u8> {
        let digest = Sha256::digest(&self.0);
        self.0.extend_from_slice(&digest);
        self.0
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Checks the trailer and returns a reader over the body.
    fn verified(bytes: &'a [u8], magic: &[u8; 4]) -> Result<Self> {
        if bytes.len() < 4 + 4 + 32 {
            return malformed("file is too short");
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != trailer {
            return malformed("checksum mismatch");
        }
        if &body[..4] != magic {
            return malformed(format!("bad magic {:?}", &body[..4]));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return malformed(format!("unsupported format version {version}"));
        }
        Ok(r)
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return malformed("unexpected end of data");
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).or_else(|_| malformed("length does not fit in memory"))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()?;
        self.take(n)
    }
    fn shape(&mut self) -> Result<Shape> {
        match self.u8()? {
            0 => Ok(Shape::Flat(self.u64()?)),
            1 => Ok(Shape::Image { channels: self.u64()?, height: self.u64()?, width: self.u64()? }),
            t => malformed(format!("unknown shape tag {t}")),
        }
    }
    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return malformed(format!("{} trailing bytes", self.buf.len() - self.pos));
        }
        Ok(())
    }
}

const LAYER_TAGS: [&str; 9] =
    ["dense", "conv2d", "conv_transpose2d", "relu", "clamp01", "sigmoid", "tanh", "reshape", "flatten"];

/// Layer descriptors followed by every parameter tensor, in layer order.
fn encode_network_body(w: &mut Writer, net: &Network) {
    w.shape(net.input_shape());
    w.u64(net.layers().len());
    for l in net.layers() {
        w.u8(LAYER_TAGS.iter().position(|&t| t == l.name()).expect("every layer has a tag") as u8);
        match l {
            Layer::Dense { weight, .. } => {
                w.u64(weight.rows());
                w.u64(weight.cols());
            }
            Layer::Conv2d(c) | Layer::ConvTranspose2d(c) => {
                for v in [c.in_channels, c.out_channels, c.kernel_size, c.stride, c.padding] {
                    w.u64(v);
                }
            }
            Layer::Reshape(s) => w.shape(*s),
            _ => {}
        }
    }
    for (wt, b) in net.layers().iter().filter_map(Layer::params) {
        w.f64s(wt);
        w.f64s(b);
    }
}

/// Hash of the architecture and weights only; metadata does not change it.
pub fn network_hash(net: &Network) -> String {
    let mut w = Writer(Vec::new());
    encode_network_body(&mut w, net);
    sha256_hex(&w.0)
}

pub fn encode_network(net: &Network, meta: &Provenance) -> Vec<u8> {
    let mut w = Writer(WEIGHTS_MAGIC.to_vec());
    w.u32(FORMAT_VERSION);
    w.bytes(serde_json::to_string(meta).expect("string map serializes").as_bytes());
    encode_network_body(&mut w, net);
    w.finish()
}

pub fn decode_network(bytes: &[u8]) -> Result<(Network, Provenance)> {
    let mut r = Reader::verified(bytes, WEIGHTS_MAGIC)?;
    let meta: Provenance =
        serde_json::from_slice(r.bytes()?).map_err(|e| Error::Format(format!("weight metadata: {e}")))?;
    let input = r.shape()?;
    let n = r.u64()?;
    let mut layers = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let tag = r.u8()?;
        let layer = match LAYER_TAGS.get(tag as usize).copied() {
            Some("dense") => {
                let (rows, cols) = (r.u64()?, r.u64()?);
                Layer::dense(Matrix::zeros(rows, cols), vec![0.0; rows])
            }
            Some(k @ ("conv2d" | "conv_transpose2d")) => {
                let mut v = [0; 5];
                for x in &mut v {
                    *x = r.u64()?;
                }
                let [in_channels, out_channels, kernel_size, stride, padding] = v;
                let len = in_channels
                    .checked_mul(out_channels)
                    .and_then(|x| x.checked_mul(kernel_size * kernel_size))
                    .ok_or_else(|| Error::Format("convolution too large".into()))?;
                let c = Conv {
                    in_channels,
                    out_channels,
                    kernel_size,
                    stride,
                    padding,
                    weight: vec![0.0; len],
                    bias: vec![0.0; out_channels],
                };
                if k == "conv2d" {
                    Layer::Conv2d(c)
                } else {
                    Layer::ConvTranspose2d(c)
                }
            }
            Some("relu") => Layer::Relu,
            Some("clamp01") => Layer::Clamp01,
            Some("sigmoid") => Layer::Sigmoid,
            Some("tanh") => Layer::Tanh,
            Some("reshape") => Layer::Reshape(r.shape()?),
            Some("flatten") => Layer::Flatten,
            _ => return malformed(format!("unknown layer tag {tag}")),
        };
        layers.push(layer);
    }
    let mut net = Network::new(input, layers).map_err(|e| Error::Format(format!("weight file: {e}")))?;
    let mut err = None;
    net.for_each_param_mut(|_, w, b| {
        for dst in [w, b] {
            match r.f64s(dst.len()) {
                Ok(v) => dst.copy_from_slice(&v),
                Err(e) => err = err.take().or(Some(e)),
            }
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    r.done()?;
    Ok((net, meta))
}

pub fn save_network(path: &Path, net: &Network, meta: &Provenance) -> Result<()> {
    Ok(std::fs::write(path, encode_network(net, meta))?)
}

pub fn load_network(path: &Path) -> Result<(Network, Provenance)> {
    decode_network(&std::fs::read(path)?)
}

/// Header `N, H, W, state_dim`, then all states and all images.
pub fn encode_dataset(data: &PairedDataset, meta: &Provenance) -> Vec<u8> {
    let mut w = Writer(DATASET_MAGIC.to_vec());
    w.u32(FORMAT_VERSION);
    w.bytes(serde_json::to_string(meta).expect("string map serializes").as_bytes());
    for v in [data.len(), data.height, data.width, data.state_dim()] {
        w.u64(v);
    }
    data.states.iter().for_each(|s| w.f64s(s));
    data.images.iter().for_each(|i| w.f64s(i));
    w.finish()
}

pub fn decode_dataset(bytes: &[u8]) -> Result<(PairedDataset, Provenance)> {
    let mut r = Reader::verified(bytes, DATASET_MAGIC)?;
    let meta: Provenance =
        serde_json::from_slice(r.bytes()?).map_err(|e| Error::Format(format!("dataset metadata: {e}")))?;
    let (n, height, width, dim) = (r.u64()?, r.u64()?, r.u64()?, r.u64()?);
    let states = (0..n).map(|_| r.f64s(dim)).collect::<Result<Vec<_>>>()?;
    let images = (0..n).map(|_| r.f64s(height * width)).collect::<Result<Vec<_>>>()?;
    r.done()?;
    Ok((PairedDataset { height, width, states, images }, meta))
}

pub fn save_dataset(path: &Path, data: &PairedDataset, meta: &Provenance) -> Result<()> {
    Ok(std::fs::write(path, encode_dataset(data, meta))?)
}

pub fn load_dataset(path: &Path) -> Result<(PairedDataset, Provenance)> {
    decode_dataset(&std::fs::read(path)?)
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    s.push('\n');
    Ok(std::fs::write(path, s)?)
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let s = std::fs::read_to_string(path)?;
    serde_json::from_str(&s).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Binary (P5) 8-bit greymap; values are clamped to `[0, 1]`.
pub fn encode_pgm(height: usize, width: usize, values: &[f64]) -> Result<Vec<u8>> {
    if values.len() != height * width {
        return Err(Error::InvalidArgument(format!("{} values for a {height}x{width} image", values.len())));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TubeRecord {
    pub cell: usize,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
    /// `(lower, upper)` of every step box, starting with the initial cell.
    pub boxes: Vec<(Vec<f64>, Vec<f64>)>,
}

/// A safety map with its tubes. Timing is kept out so the file is
/// reproducible; see [`timing_csv`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyMapFile {
    pub version: u32,
    pub env: String,
    pub grid: GridSpec,
    pub horizon: usize,
    pub provenance: Provenance,
    pub tubes: Vec<TubeRecord>,
}

impl SafetyMapFile {
    pub fn new(env: &str, map: &SafetyMap, provenance: Provenance) -> Self {
        let tubes = map
            .tubes
            .iter()
            .map(|t| TubeRecord {
                cell: t.cell,
                verdict: t.verdict,
                diagnostic: t.diagnostic.clone(),
                boxes: t.boxes.iter().map(|b| (b.lower().to_vec(), b.upper().to_vec())).collect(),
            })
            .collect();
        SafetyMapFile {
            version: FORMAT_VERSION,
            env: env.to_string(),
            grid: map.grid.clone(),
            horizon: map.horizon,
            provenance,
            tubes,
        }
    }

    pub fn to_map(&self) -> Result<SafetyMap> {
        if self.tubes.len() != self.grid.num_cells() {
            return malformed(format!("{} tubes for {} cells", self.tubes.len(), self.grid.num_cells()));
        }
        let tubes = self
            .tubes
            .iter()
            .map(|t| {
                Ok(ReachTube {
                    cell: t.cell,
                    boxes: t
                        .boxes
                        .iter()
                        .map(|(lo, hi)| Hyperbox::new(lo.clone(), hi.clone()))
                        .collect::<Result<_>>()?,
                    actions: Vec::new(),
                    verdict: t.verdict,
                    diagnostic: t.diagnostic.clone(),
                    stars: Vec::new(),
                    seconds: 0.0,
                    lp_refined: 0,
                    lp_skipped: 0,
                })
            })
            .collect::<Result<_>>()?;
        Ok(SafetyMap { grid: self.grid.clone(), horizon: self.horizon, tubes })
    }
}

fn provenance_header(out: &mut String, provenance: &Provenance) {
    for (k, v) in provenance {
        let _ = writeln!(out, "# {k}={v}");
    }
}

/// One row per cell: grid index, cell bounds, verdict and final-box bounds.
pub fn safety_map_csv(map: &SafetyMap, provenance: &Provenance) -> String {
    let mut out = String::new();
    provenance_header(&mut out, provenance);
    let d = map.grid.dim();
    let mut head: Vec<String> = vec!["cell".into()];
    head.extend((0..d).map(|i| format!("i{i}")));
    head.extend((0..d).flat_map(|i| [format!("lo{i}"), format!("hi{i}")]));
    head.push("verdict".into());
    let n = map.tubes.first().map_or(0, |t| t.final_box().dim());
    head.extend((0..n).flat_map(|i| [format!("final_lo{i}"), format!("final_hi{i}")]));
    out.push_str(&head.join(","));
    out.push('\n');
    for (k, t) in map.tubes.iter().enumerate() {
        let cell = map.grid.cell(k);
        let mut row = vec![k.to_string()];
        row.extend(map.grid.index(k).iter().map(usize::to_string));
        row.extend((0..d).flat_map(|i| [cell.lower()[i].to_string(), cell.upper()[i].to_string()]));
        row.push(t.verdict.name().into());
        let f = t.final_box();
        row.extend((0..f.dim()).flat_map(|i| [f.lower()[i].to_string(), f.upper()[i].to_string()]));
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Wall-clock seconds per cell; varies between runs, unlike the map itself.
pub fn timing_csv(map: &SafetyMap) -> String {
    let mut out = String::from("cell,seconds,lp_refined,lp_skipped\n");
    for t in &map.tubes {
        let _ = writeln!(out, "{},{:.6},{},{}", t.cell, t.seconds, t.lp_refined, t.lp_skipped);
    }
    let _ = writeln!(out, "# total_seconds={:.3}", map.total_seconds());
    out
}

/// Two-dimensional maps as a picture: white verified, grey not verified,
/// black infeasible. Columns follow the first grid axis, rows the second
/// with larger values at the top.
pub fn safety_map_pgm(map: &SafetyMap) -> Result<Vec<u8>> {
    let shape = map.grid.shape();
    let [nx, ny] = shape[..] else {
        return Err(Error::InvalidArgument(format!("a {}-D grid cannot be drawn", shape.len())));
    };
    let mut px = vec![0.0; nx * ny];
    for (k, t) in map.tubes.iter().enumerate() {
        let idx = map.grid.index(k);
        px[(ny - 1 - idx[1]) * nx + idx[0]] = match t.verdict {
            Verdict::VerifiedGoal => 1.0,
            Verdict::NotVerified => 0.5,
            Verdict::Infeasible => 0.0,
        };
    }
    encode_pgm(ny, nx, &px)
}

/// Columns `t, s0.., u` with an empty action on the final state.
pub fn trajectory_csv(t: &Trajectory) -> String {
    let dim = t.initial().len();
    let mut out = String::from("t,");
    out.push_str(&(0..dim).map(|i| format!("s{i}")).collect::<Vec<_>>().join(","));
    out.push_str(",u\n");
    for (i, s) in t.states.iter().enumerate() {
        let vals: Vec<String> = s.iter().map(f64::to_string).collect();
        let u = t.actions.get(i).map_or(String::new(), f64::to_string);
        let _ = writeln!(out, "{i},{},{u}", vals.join(","));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{EnvKind, EnvModel};
    use crate::nn::arch::{self, OutputActivation};
    use crate::reach::{ClosedLoop, ReachOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn controller() -> Network {
        let mut c = arch::controller(8, 8, OutputActivation::Sigmoid).unwrap();
        c.init_fan_in_uniform(&mut ChaCha8Rng::seed_from_u64(3));
        c
    }

    #[test]
    fn weight_container_round_trips_bit_exactly() {
        let mut dec = arch::decoder(2, 16, 8).unwrap();
        dec.init_fan_in_uniform(&mut ChaCha8Rng::seed_from_u64(1));
        let meta: Provenance = [("dataset".to_string(), "abc".to_string())].into();
        let bytes = encode_network(&dec, &meta);
        let (back, m) = decode_network(&bytes).unwrap();
        assert_eq!(back, dec);
        assert_eq!(m, meta);
        assert_eq!(encode_network(&back, &m), bytes);
        assert_eq!(network_hash(&back), network_hash(&dec));
        assert_ne!(network_hash(&dec), network_hash(&controller()));
    }

    #[test]
    fn corrupted_containers_are_rejected() {
        let bytes = encode_network(&controller(), &Provenance::new());
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(decode_network(&flipped), Err(Error::Format(_))));
        assert!(decode_network(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_network(&bytes[..10]).is_err());
        let data = PairedDataset { height: 1, width: 1, states: vec![vec![0.0]], images: vec![vec![0.5]] };
        assert!(decode_network(&encode_dataset(&data, &Provenance::new())).is_err());
    }

    #[test]
    fn dataset_round_trips() {
        let env = EnvModel::new(EnvKind::MountainCar, 8, 8);
        let data = crate::training::generate_dataset(&env, 5, 2).unwrap();
        let bytes = encode_dataset(&data, &Provenance::new());
        assert_eq!(&bytes[..4], DATASET_MAGIC);
        let (back, _) = decode_dataset(&bytes).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn pgm_header_and_scaling() {
        let p = encode_pgm(1, 3, &[0.0, 0.5, 2.0]).unwrap();
        assert_eq!(p, b"P5\n3 1\n255\n\x00\x80\xff".to_vec());
        assert!(encode_pgm(2, 2, &[0.0]).is_err());
    }

    #[test]
    fn safety_map_files_round_trip_and_skip_timing() {
        let env = EnvModel::new(EnvKind::MountainCar, 8, 8);
        let mut dec = arch::decoder(2, 8, 8).unwrap();
        dec.init_fan_in_uniform(&mut ChaCha8Rng::seed_from_u64(2));
        let ctrl = controller();
        let cl = ClosedLoop { env: &env, decoder: &dec, controller: &ctrl };
        let grid = GridSpec::new(vec![-0.6, -0.01], vec![-0.5, 0.01], vec![0.05, 0.01]).unwrap();
        let map = cl.sweep_grid(&grid, &ReachOptions { horizon: 2, ..Default::default() }, 1);
        let file = SafetyMapFile::new("mountain-car", &map, Provenance::new());
        let json = serde_json::to_string(&file).unwrap();
        assert!(!json.contains("seconds"));
        let back: SafetyMapFile = serde_json::from_str(&json).unwrap();
        let m2 = back.to_map().unwrap();
        assert_eq!(m2.verdicts(), map.verdicts());
        assert_eq!(m2.tubes[3].boxes, map.tubes[3].boxes);
        let csv = safety_map_csv(&map, &[("decoder".into(), "h".into())].into());
        assert_eq!(csv.lines().count(), 1 + 1 + 4);
        assert!(csv.starts_with("# decoder=h\ncell,i0,i1,lo0,hi0,lo1,hi1,verdict,final_lo0"));
        let pgm = safety_map_pgm(&map).unwrap();
        assert!(pgm.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(timing_csv(&map).lines().count(), 6);
    }

    #[test]
    fn trajectory_csv_leaves_the_last_action_blank() {
        let env = EnvModel::new(EnvKind::Pendulum, 8, 8);
        let t = env.expert_rollout(&[3.0, 0.0], 2).unwrap();
        let csv = trajectory_csv(&t);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "t,s0,s1,u");
        assert_eq!(lines.len(), 4);
        assert!(lines[3].ends_with(','));
    }
}
