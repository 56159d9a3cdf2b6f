//! On-disk formats: the "FTZ1" binary tensor container and the
//! line-delimited scene manifest, plus loading of complete scene pairs.
//!
//! FTZ layout: magic `FTZ1`, dtype tag (1 byte), rank (1 byte), each dim
//! as 8-byte little-endian unsigned, then raw little-endian scalars.
//! Roundtrips are bit-exact for every dtype and rank 1..=4.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{FicopError, Result};
use crate::geometry::{PinholeCamera, RigidTransform};
use crate::scene::{ObjectModel, ScenePair, ViewData};

const MAGIC: &[u8; 4] = b"FTZ1";
const MAX_RANK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
    U8,
}

impl Dtype {
    fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
            Dtype::U8 => 2,
        }
    }

    fn from_tag(tag: u8, path: &Path) -> Result<Self> {
        match tag {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            2 => Ok(Dtype::U8),
            _ => Err(FicopError::format(path, format!("unknown dtype tag {tag}"))),
        }
    }

    pub fn elem_size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::F32(_) => Dtype::F32,
            TensorData::F64(_) => Dtype::F64,
            TensorData::U8(_) => Dtype::U8,
        }
    }
}

/// Row-major dense tensor, rank 1..=4.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBlob {
    shape: Vec<usize>,
    data: TensorData,
}

impl TensorBlob {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        if shape.is_empty() || shape.len() > MAX_RANK {
            return Err(FicopError::Validation(format!(
                "tensor rank {} outside 1..={MAX_RANK}",
                shape.len()
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(FicopError::Validation(format!(
                "tensor shape {shape:?} has a zero dim"
            )));
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| {
                FicopError::Validation(format!("tensor shape {shape:?} overflows"))
            })?;
        if count != data.len() {
            return Err(FicopError::Validation(format!(
                "shape {shape:?} implies {count} elements but data has {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn dtype(&self) -> Dtype {
        self.data.dtype()
    }

    pub fn from_array2_f32(a: &Array2<f32>) -> Self {
        let (h, w) = a.dim();
        Self {
            shape: vec![h, w],
            data: TensorData::F32(a.iter().copied().collect()),
        }
    }

    pub fn from_array2_u8(a: &Array2<u8>) -> Self {
        let (h, w) = a.dim();
        Self {
            shape: vec![h, w],
            data: TensorData::U8(a.iter().copied().collect()),
        }
    }

    pub fn from_array3_f32(a: &Array3<f32>) -> Self {
        let (h, w, c) = a.dim();
        Self {
            shape: vec![h, w, c],
            data: TensorData::F32(a.iter().copied().collect()),
        }
    }

    pub fn from_array2_f64(a: &Array2<f64>) -> Self {
        let (h, w) = a.dim();
        Self {
            shape: vec![h, w],
            data: TensorData::F64(a.iter().copied().collect()),
        }
    }

    pub fn to_array2_f32(&self) -> Result<Array2<f32>> {
        let [h, w] = self.expect_rank::<2>()?;
        match &self.data {
            TensorData::F32(v) => Ok(Array2::from_shape_vec((h, w), v.clone()).unwrap()),
            _ => Err(FicopError::Validation("expected f32 tensor".into())),
        }
    }

    pub fn to_array2_f64(&self) -> Result<Array2<f64>> {
        let [h, w] = self.expect_rank::<2>()?;
        match &self.data {
            TensorData::F64(v) => Ok(Array2::from_shape_vec((h, w), v.clone()).unwrap()),
            TensorData::F32(v) => Ok(Array2::from_shape_vec(
                (h, w),
                v.iter().map(|&x| x as f64).collect(),
            )
            .unwrap()),
            _ => Err(FicopError::Validation("expected float tensor".into())),
        }
    }

    pub fn to_array2_u8(&self) -> Result<Array2<u8>> {
        let [h, w] = self.expect_rank::<2>()?;
        match &self.data {
            TensorData::U8(v) => Ok(Array2::from_shape_vec((h, w), v.clone()).unwrap()),
            _ => Err(FicopError::Validation("expected u8 tensor".into())),
        }
    }

    pub fn to_array3_f32(&self) -> Result<Array3<f32>> {
        let [h, w, c] = self.expect_rank::<3>()?;
        match &self.data {
            TensorData::F32(v) => Ok(Array3::from_shape_vec((h, w, c), v.clone()).unwrap()),
            _ => Err(FicopError::Validation("expected f32 tensor".into())),
        }
    }

    pub fn to_array1_f32(&self) -> Result<Array1<f32>> {
        let [n] = self.expect_rank::<1>()?;
        match &self.data {
            TensorData::F32(v) => Ok(Array1::from_shape_vec(n, v.clone()).unwrap()),
            _ => Err(FicopError::Validation("expected f32 tensor".into())),
        }
    }

    fn expect_rank<const R: usize>(&self) -> Result<[usize; R]> {
        if self.shape.len() != R {
            return Err(FicopError::Validation(format!(
                "expected rank {R} tensor, got shape {:?}",
                self.shape
            )));
        }
        let mut out = [0usize; R];
        out.copy_from_slice(&self.shape);
        Ok(out)
    }
}

pub fn write_tensor(blob: &TensorBlob, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| FicopError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| FicopError::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&[blob.dtype().tag(), blob.shape.len() as u8])
        .map_err(io)?;
    for &dim in &blob.shape {
        w.write_all(&(dim as u64).to_le_bytes()).map_err(io)?;
    }
    match &blob.data {
        TensorData::F32(v) => {
            for x in v {
                w.write_all(&x.to_le_bytes()).map_err(io)?;
            }
        }
        TensorData::F64(v) => {
            for x in v {
                w.write_all(&x.to_le_bytes()).map_err(io)?;
            }
        }
        TensorData::U8(v) => w.write_all(v).map_err(io)?,
    }
    w.flush().map_err(io)
}

pub fn read_tensor(path: &Path) -> Result<TensorBlob> {
    let bytes = fs::read(path).map_err(|e| FicopError::io(path, e))?;
    read_tensor_bytes(&bytes, path)
}

fn read_tensor_bytes(bytes: &[u8], path: &Path) -> Result<TensorBlob> {
    if bytes.len() < 6 {
        return Err(FicopError::format(path, "file shorter than header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(FicopError::format(
            path,
            format!("bad magic {:?}, expected \"FTZ1\"", &bytes[0..4]),
        ));
    }
    let dtype = Dtype::from_tag(bytes[4], path)?;
    let rank = bytes[5] as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(FicopError::format(path, format!("rank {rank} outside 1..={MAX_RANK}")));
    }
    let header = 6 + 8 * rank;
    if bytes.len() < header {
        return Err(FicopError::format(path, "truncated shape header"));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let mut dim = [0u8; 8];
        dim.copy_from_slice(&bytes[6 + 8 * i..14 + 8 * i]);
        let dim = u64::from_le_bytes(dim);
        let dim = usize::try_from(dim)
            .map_err(|_| FicopError::format(path, format!("dim {dim} exceeds usize")))?;
        if dim == 0 {
            return Err(FicopError::format(path, "zero dimension"));
        }
        shape.push(dim);
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| FicopError::format(path, format!("shape {shape:?} product overflows")))?;
    let payload = count
        .checked_mul(dtype.elem_size())
        .ok_or_else(|| FicopError::format(path, "payload size overflows"))?;
    if bytes.len() != header + payload {
        return Err(FicopError::format(
            path,
            format!(
                "payload size mismatch: shape {shape:?} needs {payload} bytes, file has {}",
                bytes.len() - header
            ),
        ));
    }
    let raw = &bytes[header..];
    let data = match dtype {
        Dtype::F32 => TensorData::F32(
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        Dtype::F64 => TensorData::F64(
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        Dtype::U8 => TensorData::U8(raw.to_vec()),
    };
    TensorBlob::new(shape, data)
}

/// One scene record of the line-delimited manifest format.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneManifest {
    pub scene_id: String,
    pub anchor: ViewManifest,
    pub query: ViewManifest,
    #[serde(rename = "gt_pose_A_to_Q")]
    pub gt_pose_a_to_q: [[f64; 4]; 4],
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gt_corr_path: Option<String>,
    pub object_model_path: String,
    pub object_diameter: f64,
    pub prompt_text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ViewManifest {
    pub feature_path: String,
    pub mask_path: String,
    pub depth_path: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rgb_path: Option<String>,
    pub intrinsics: [[f64; 3]; 3],
}

impl SceneManifest {
    pub fn validate(&self) -> Result<()> {
        for (name, view) in [("anchor", &self.anchor), ("query", &self.query)] {
            let k = &view.intrinsics;
            if k[0][0] <= 0.0 || k[1][1] <= 0.0 {
                return Err(FicopError::Validation(format!(
                    "{name} intrinsics: non-positive focal (fx={}, fy={})",
                    k[0][0], k[1][1]
                )));
            }
            if !k[0][2].is_finite() || !k[1][2].is_finite() {
                return Err(FicopError::Validation(format!(
                    "{name} intrinsics: non-finite principal point"
                )));
            }
        }
        RigidTransform::from_matrix4(&self.gt_pose_a_to_q).map_err(|e| {
            FicopError::Validation(format!("gt_pose_A_to_Q: {e}"))
        })?;
        if self.object_diameter <= 0.0 {
            return Err(FicopError::Validation(format!(
                "object_diameter {} must be positive",
                self.object_diameter
            )));
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let line = serde_json::to_string(self)
            .map_err(|e| FicopError::Validation(format!("manifest serialization: {e}")))?;
        fs::write(path, line + "\n").map_err(|e| FicopError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| FicopError::io(path, e))?;
        let line = text
            .lines()
            .find(|l| !l.trim().is_empty())
            .ok_or_else(|| FicopError::format(path, "empty manifest"))?;
        let manifest: SceneManifest = serde_json::from_str(line)
            .map_err(|e| FicopError::format(path, format!("bad manifest record: {e}")))?;
        manifest.validate()?;
        Ok(manifest)
    }
}

fn resolve(base: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn load_view(base: &Path, vm: &ViewManifest, name: &str) -> Result<ViewData> {
    let features = read_tensor(&resolve(base, &vm.feature_path))?.to_array3_f32()?;
    let mask = read_tensor(&resolve(base, &vm.mask_path))?.to_array2_u8()?;
    let depth = read_tensor(&resolve(base, &vm.depth_path))?.to_array2_f32()?;
    let (h, w, _) = features.dim();
    if mask.dim() != (h, w) {
        return Err(FicopError::Validation(format!(
            "{name}: mask {:?} does not match feature map {h}x{w}",
            mask.dim()
        )));
    }
    if depth.dim() != (h, w) {
        return Err(FicopError::Validation(format!(
            "{name}: depth {:?} does not match feature map {h}x{w}",
            depth.dim()
        )));
    }
    let k = &vm.intrinsics;
    let cam = PinholeCamera::new(k[0][0], k[1][1], k[0][2], k[1][2], w, h)?;
    Ok(ViewData { features, mask, depth, cam })
}

/// Load a full scene pair from a manifest file; tensor paths are resolved
/// relative to the manifest's directory.
pub fn load_scene(manifest_path: &Path) -> Result<ScenePair> {
    let manifest = SceneManifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let anchor = load_view(base, &manifest.anchor, "anchor")?;
    let query = load_view(base, &manifest.query, "query")?;
    let gt_pose = RigidTransform::from_matrix4(&manifest.gt_pose_a_to_q)?;
    let gt_corr = match &manifest.gt_corr_path {
        Some(rel) => {
            let t = read_tensor(&resolve(base, rel))?.to_array2_f64()?;
            if t.ncols() != 4 {
                return Err(FicopError::Validation(format!(
                    "gt_corr tensor must be Nx4, got Nx{}",
                    t.ncols()
                )));
            }
            t.rows()
                .into_iter()
                .map(|r| ((r[0] as usize, r[1] as usize), (r[2] as usize, r[3] as usize)))
                .collect()
        }
        None => Vec::new(),
    };
    let model_pts = read_tensor(&resolve(base, &manifest.object_model_path))?.to_array2_f64()?;
    if model_pts.ncols() != 3 {
        return Err(FicopError::Validation(format!(
            "object model tensor must be Nx3, got Nx{}",
            model_pts.ncols()
        )));
    }
    let model = ObjectModel::new(
        model_pts
            .rows()
            .into_iter()
            .map(|r| nalgebra::Vector3::new(r[0], r[1], r[2]))
            .collect(),
        manifest.object_diameter,
        vec![RigidTransform::identity()],
    )?;
    let scene = ScenePair {
        scene_id: manifest.scene_id.clone(),
        anchor,
        query,
        gt_pose,
        gt_corr,
        model,
        prompt_text: manifest.prompt_text.clone(),
    };
    scene.validate()?;
    Ok(scene)
}
