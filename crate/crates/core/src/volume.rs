//! 3-D scalar volumes: storage, header/raw file i/o, intensity normalization,
//! the resolution pyramid, trilinear sampling and image gradients.
//!
//! Volumes are stored x-fastest (`idx = x + nx*(y + ny*z)`) as `f64`; all
//! accumulation in the crate runs in double precision. The on-disk format is
//! a tiny ASCII header (`key = value` per line) next to a little-endian raw
//! payload, see [`VolumeHeader`].

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// A scalar 3-D image with voxel spacing in millimeters.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    dims: (usize, usize, usize),
    spacing: (f64, f64, f64),
    data: Vec<f64>,
}

impl Volume3D {
    pub fn new(dims: (usize, usize, usize), spacing: (f64, f64, f64), fill: f64) -> Volume3D {
        assert!(dims.0 > 0 && dims.1 > 0 && dims.2 > 0, "empty dims");
        assert!(
            spacing.0 > 0.0 && spacing.1 > 0.0 && spacing.2 > 0.0,
            "non-positive spacing"
        );
        Volume3D {
            dims,
            spacing,
            data: vec![fill; dims.0 * dims.1 * dims.2],
        }
    }

    pub fn from_data(
        dims: (usize, usize, usize),
        spacing: (f64, f64, f64),
        data: Vec<f64>,
    ) -> Result<Volume3D> {
        if data.len() != dims.0 * dims.1 * dims.2 {
            return Err(Error::DimMismatch(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        Ok(Volume3D {
            dims,
            spacing,
            data,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn spacing(&self) -> (f64, f64, f64) {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims.0 * (y + self.dims.1 * z)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.index(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f64) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    pub fn min_max(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in &self.data {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    /// Linearly map intensities onto `[0, l_max]`.
    ///
    /// Without a window the full `[min, max]` range is mapped; a constant
    /// volume maps to all zeros. With `window = (lo, hi)` values are clamped
    /// to the window first, which keeps outliers from compressing the
    /// histogram range.
    pub fn normalize_intensity(&self, l_max: usize, window: Option<(f64, f64)>) -> Volume3D {
        let (lo, hi) = match window {
            Some((lo, hi)) => {
                assert!(lo < hi, "window lo must be < hi");
                (lo, hi)
            }
            None => self.min_max(),
        };
        let mut out = self.clone();
        if hi <= lo {
            out.data.iter_mut().for_each(|v| *v = 0.0);
            return out;
        }
        // already exactly [0, l_max] and nothing to clamp: the map is the
        // identity, returning as-is keeps repeated normalization exact
        if window.is_none() && lo == 0.0 && hi == l_max as f64 {
            return out;
        }
        let range = hi - lo;
        let l = l_max as f64;
        for v in &mut out.data {
            let c = v.clamp(lo, hi);
            *v = (c - lo) / range * l;
        }
        out
    }

    /// Smooth with an isotropic Gaussian (sigma = 1 voxel, truncated at 3
    /// sigma, renormalized at borders) and decimate by 2 per axis. Spacing
    /// doubles; output dims are `ceil(n/2)`.
    pub fn gaussian_downsample(&self) -> Result<Volume3D> {
        let (nx, ny, nz) = self.dims;
        if nx < 4 || ny < 4 || nz < 4 {
            return Err(Error::DimTooSmall(format!(
                "gaussian_downsample needs every dimension >= 4, got {:?}",
                self.dims
            )));
        }
        let kernel = gaussian_kernel_sigma1();
        let sx = smooth_axis(&self.data, self.dims, 0, &kernel);
        let sy = smooth_axis(&sx, self.dims, 1, &kernel);
        let sz = smooth_axis(&sy, self.dims, 2, &kernel);

        let od = (nx.div_ceil(2), ny.div_ceil(2), nz.div_ceil(2));
        let mut out = Vec::with_capacity(od.0 * od.1 * od.2);
        for z in 0..od.2 {
            for y in 0..od.1 {
                for x in 0..od.0 {
                    out.push(sz[(2 * x) + nx * ((2 * y) + ny * (2 * z))]);
                }
            }
        }
        Volume3D::from_data(
            od,
            (
                self.spacing.0 * 2.0,
                self.spacing.1 * 2.0,
                self.spacing.2 * 2.0,
            ),
            out,
        )
    }

    /// Trilinear interpolation at a continuous voxel coordinate. Coordinates
    /// are clamped to `[0, n-1]` per axis, so out-of-domain samples take the
    /// border value instead of introducing artificial edges.
    pub fn trilinear_sample(&self, p: [f64; 3]) -> f64 {
        let (c, f) = self.cell_of(p);
        let (nx, ny, nz) = self.dims;
        let i000 = c[0] + nx * (c[1] + ny * c[2]);
        let dx = if nx > 1 { 1 } else { 0 };
        let dy = if ny > 1 { nx } else { 0 };
        let dz = if nz > 1 { nx * ny } else { 0 };
        let d = &self.data;
        let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
        let v00 = lerp(d[i000], d[i000 + dx], f[0]);
        let v10 = lerp(d[i000 + dy], d[i000 + dy + dx], f[0]);
        let v01 = lerp(d[i000 + dz], d[i000 + dz + dx], f[0]);
        let v11 = lerp(d[i000 + dz + dy], d[i000 + dz + dy + dx], f[0]);
        let v0 = lerp(v00, v10, f[1]);
        let v1 = lerp(v01, v11, f[1]);
        lerp(v0, v1, f[2])
    }

    /// Trilinear sample plus the exact spatial derivative of the interpolant
    /// at `p`, in intensity per voxel. The derivative along an axis is zero
    /// when `p` lies outside the domain on that axis (the clamped value is
    /// constant there).
    pub fn sample_with_gradient(&self, p: [f64; 3]) -> (f64, [f64; 3]) {
        let (c, f) = self.cell_of(p);
        let (nx, ny, nz) = self.dims;
        let i000 = c[0] + nx * (c[1] + ny * c[2]);
        let dx = if nx > 1 { 1 } else { 0 };
        let dy = if ny > 1 { nx } else { 0 };
        let dz = if nz > 1 { nx * ny } else { 0 };
        let d = &self.data;
        let v000 = d[i000];
        let v100 = d[i000 + dx];
        let v010 = d[i000 + dy];
        let v110 = d[i000 + dy + dx];
        let v001 = d[i000 + dz];
        let v101 = d[i000 + dz + dx];
        let v011 = d[i000 + dz + dy];
        let v111 = d[i000 + dz + dy + dx];

        let (fx, fy, fz) = (f[0], f[1], f[2]);
        let gx = 1.0 - fx;
        let gy = 1.0 - fy;
        let gz = 1.0 - fz;

        let value = gz * (gy * (gx * v000 + fx * v100) + fy * (gx * v010 + fx * v110))
            + fz * (gy * (gx * v001 + fx * v101) + fy * (gx * v011 + fx * v111));

        let mut grad = [
            gz * (gy * (v100 - v000) + fy * (v110 - v010))
                + fz * (gy * (v101 - v001) + fy * (v111 - v011)),
            gz * (gx * (v010 - v000) + fx * (v110 - v100))
                + fz * (gx * (v011 - v001) + fx * (v111 - v101)),
            gy * (gx * (v001 - v000) + fx * (v101 - v100))
                + fy * (gx * (v011 - v010) + fx * (v111 - v110)),
        ];
        let n = [nx, ny, nz];
        for a in 0..3 {
            if p[a] < 0.0 || p[a] > (n[a] - 1) as f64 || n[a] == 1 {
                grad[a] = 0.0;
            }
        }
        (value, grad)
    }

    /// Per-axis image gradient: central differences in the interior,
    /// one-sided at the borders, in intensity per voxel.
    pub fn image_gradient(&self) -> Result<[Volume3D; 3]> {
        let (nx, ny, nz) = self.dims;
        if nx < 2 || ny < 2 || nz < 2 {
            return Err(Error::DimTooSmall(format!(
                "image_gradient needs every dimension >= 2, got {:?}",
                self.dims
            )));
        }
        let mut gx = self.clone();
        let mut gy = self.clone();
        let mut gz = self.clone();
        let stride = [1usize, nx, nx * ny];
        let n = [nx, ny, nz];
        for (axis, out) in [&mut gx, &mut gy, &mut gz].into_iter().enumerate() {
            let s = stride[axis];
            let last = n[axis] - 1;
            for z in 0..nz {
                for y in 0..ny {
                    for x in 0..nx {
                        let i = self.index(x, y, z);
                        let c = [x, y, z][axis];
                        out.data[i] = if c == 0 {
                            self.data[i + s] - self.data[i]
                        } else if c == last {
                            self.data[i] - self.data[i - s]
                        } else {
                            0.5 * (self.data[i + s] - self.data[i - s])
                        };
                    }
                }
            }
        }
        Ok([gx, gy, gz])
    }

    /// Containing cell index (clamped so `c+1` is valid) and the fractional
    /// offset within it, after clamping `p` to the domain.
    #[inline]
    fn cell_of(&self, p: [f64; 3]) -> ([usize; 3], [f64; 3]) {
        let n = [self.dims.0, self.dims.1, self.dims.2];
        let mut c = [0usize; 3];
        let mut f = [0.0f64; 3];
        for a in 0..3 {
            if n[a] == 1 {
                continue;
            }
            let pc = p[a].clamp(0.0, (n[a] - 1) as f64);
            let cell = (pc.floor() as usize).min(n[a] - 2);
            c[a] = cell;
            f[a] = pc - cell as f64;
        }
        (c, f)
    }
}

fn gaussian_kernel_sigma1() -> [f64; 7] {
    let mut k = [0.0; 7];
    let mut sum = 0.0;
    for (i, item) in k.iter_mut().enumerate() {
        let t = i as f64 - 3.0;
        *item = (-0.5 * t * t).exp();
        sum += *item;
    }
    for item in &mut k {
        *item /= sum;
    }
    k
}

/// One separable smoothing pass along `axis`, renormalizing the kernel where
/// it overhangs the border so constants are preserved.
fn smooth_axis(data: &[f64], dims: (usize, usize, usize), axis: usize, kernel: &[f64; 7]) -> Vec<f64> {
    let (nx, ny, nz) = dims;
    let stride = [1usize, nx, nx * ny][axis];
    let n = [nx, ny, nz][axis];
    let mut out = vec![0.0; data.len()];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = x + nx * (y + ny * z);
                let c = [x, y, z][axis] as isize;
                let mut acc = 0.0;
                let mut wsum = 0.0;
                for (k, &w) in kernel.iter().enumerate() {
                    let t = c + k as isize - 3;
                    if t < 0 || t >= n as isize {
                        continue;
                    }
                    let j = (i as isize + (t - c) * stride as isize) as usize;
                    acc += w * data[j];
                    wsum += w;
                }
                out[i] = acc / wsum;
            }
        }
    }
    out
}

/// Supported raw payload element types.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementType {
    Float32,
    Int16,
    Uint8,
}

impl ElementType {
    pub fn name(&self) -> &'static str {
        match self {
            ElementType::Float32 => "float32",
            ElementType::Int16 => "int16",
            ElementType::Uint8 => "uint8",
        }
    }

    pub fn byte_size(&self) -> usize {
        match self {
            ElementType::Float32 => 4,
            ElementType::Int16 => 2,
            ElementType::Uint8 => 1,
        }
    }

    pub fn parse(s: &str) -> Result<ElementType> {
        match s {
            "float32" => Ok(ElementType::Float32),
            "int16" => Ok(ElementType::Int16),
            "uint8" => Ok(ElementType::Uint8),
            other => Err(Error::UnsupportedElementType(other.to_string())),
        }
    }
}

/// Parsed ASCII header. One `key = value` per line with exactly the keys
/// `dim_size`, `spacing`, `element_type`, `byte_order`, `components` and
/// `data_file` (a path relative to the header).
#[derive(Debug, Clone)]
pub struct VolumeHeader {
    pub dim_size: (usize, usize, usize),
    pub spacing: (f64, f64, f64),
    pub element_type: ElementType,
    pub components: usize,
    pub data_file: PathBuf,
}

impl VolumeHeader {
    pub fn voxels(&self) -> usize {
        self.dim_size.0 * self.dim_size.1 * self.dim_size.2
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_header(path: &Path) -> Result<VolumeHeader> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut dim_size = None;
    let mut spacing = None;
    let mut element_type = None;
    let mut byte_order = None;
    let mut components = None;
    let mut data_file = None;

    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "{}: malformed header line `{line}`",
                path.display()
            )));
        };
        let key = key.trim();
        let value = value.trim();
        let bad = |k: &'static str| Error::BadValue {
            path: path.to_path_buf(),
            key: k,
            value: value.to_string(),
        };
        match key {
            "dim_size" => {
                let v: Vec<usize> = value
                    .split_whitespace()
                    .map(|t| t.parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad("dim_size"))?;
                if v.len() != 3 || v.contains(&0) {
                    return Err(bad("dim_size"));
                }
                dim_size = Some((v[0], v[1], v[2]));
            }
            "spacing" => {
                let v: Vec<f64> = value
                    .split_whitespace()
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad("spacing"))?;
                if v.len() != 3 || !v.iter().all(|&s| s > 0.0) {
                    return Err(bad("spacing"));
                }
                spacing = Some((v[0], v[1], v[2]));
            }
            "element_type" => element_type = Some(ElementType::parse(value)?),
            "byte_order" => {
                if value != "little" {
                    return Err(bad("byte_order"));
                }
                byte_order = Some(());
            }
            "components" => {
                let c: usize = value.parse().map_err(|_| bad("components"))?;
                if c != 1 && c != 3 {
                    return Err(bad("components"));
                }
                components = Some(c);
            }
            "data_file" => data_file = Some(PathBuf::from(value)),
            _ => {
                return Err(Error::Config(format!(
                    "{}: unknown header key `{key}`",
                    path.display()
                )))
            }
        }
    }

    let missing = |key: &'static str| Error::MissingKey {
        path: path.to_path_buf(),
        key,
    };
    byte_order.ok_or_else(|| missing("byte_order"))?;
    Ok(VolumeHeader {
        dim_size: dim_size.ok_or_else(|| missing("dim_size"))?,
        spacing: spacing.ok_or_else(|| missing("spacing"))?,
        element_type: element_type.ok_or_else(|| missing("element_type"))?,
        components: components.ok_or_else(|| missing("components"))?,
        data_file: data_file.ok_or_else(|| missing("data_file"))?,
    })
}

/// Read a header plus its payload, decoded to `f64`, interleaved
/// component-major per voxel for `components = 3`.
pub fn read_payload(path: &Path) -> Result<(VolumeHeader, Vec<f64>)> {
    let header = read_header(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let raw_path = dir.join(&header.data_file);
    let raw = fs::read(&raw_path).map_err(io_err(&raw_path))?;
    let count = header.voxels() * header.components;
    let expected = count * header.element_type.byte_size();
    if raw.len() != expected {
        return Err(Error::PayloadLength {
            expected,
            actual: raw.len(),
        });
    }
    let mut data = Vec::with_capacity(count);
    match header.element_type {
        ElementType::Float32 => {
            for c in raw.chunks_exact(4) {
                data.push(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
            }
        }
        ElementType::Int16 => {
            for c in raw.chunks_exact(2) {
                data.push(i16::from_le_bytes([c[0], c[1]]) as f64);
            }
        }
        ElementType::Uint8 => {
            for &b in &raw {
                data.push(b as f64);
            }
        }
    }
    Ok((header, data))
}

/// Encode and write a payload + header pair. `data_file` is derived from the
/// header path by swapping the extension to `.raw`.
pub fn write_payload(
    path: &Path,
    dims: (usize, usize, usize),
    spacing: (f64, f64, f64),
    components: usize,
    element_type: ElementType,
    data: &[f64],
) -> Result<()> {
    assert_eq!(data.len(), dims.0 * dims.1 * dims.2 * components);
    let raw_name = {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "volume".to_string());
        format!("{stem}.raw")
    };
    let mut raw = Vec::with_capacity(data.len() * element_type.byte_size());
    match element_type {
        ElementType::Float32 => {
            for &v in data {
                raw.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        ElementType::Int16 => {
            for (i, &v) in data.iter().enumerate() {
                let r = v.round();
                if (v - r).abs() > 1e-6 || r < i16::MIN as f64 || r > i16::MAX as f64 {
                    return Err(Error::NotRepresentable {
                        value: v,
                        index: i,
                        target: "int16",
                    });
                }
                raw.extend_from_slice(&(r as i16).to_le_bytes());
            }
        }
        ElementType::Uint8 => {
            for (i, &v) in data.iter().enumerate() {
                let r = v.round();
                if (v - r).abs() > 1e-6 || !(0.0..=255.0).contains(&r) {
                    return Err(Error::NotRepresentable {
                        value: v,
                        index: i,
                        target: "uint8",
                    });
                }
                raw.push(r as u8);
            }
        }
    }

    let mut header = String::new();
    let _ = writeln!(header, "dim_size = {} {} {}", dims.0, dims.1, dims.2);
    let _ = writeln!(header, "spacing = {} {} {}", spacing.0, spacing.1, spacing.2);
    let _ = writeln!(header, "element_type = {}", element_type.name());
    let _ = writeln!(header, "byte_order = little");
    let _ = writeln!(header, "components = {components}");
    let _ = writeln!(header, "data_file = {raw_name}");

    let dir = path.parent().unwrap_or(Path::new("."));
    fs::write(path, header).map_err(io_err(path))?;
    let raw_path = dir.join(raw_name);
    fs::write(&raw_path, raw).map_err(io_err(&raw_path))?;
    Ok(())
}

/// Load a scalar volume (`components = 1`).
pub fn load_volume(path: &Path) -> Result<Volume3D> {
    let (header, data) = read_payload(path)?;
    if header.components != 1 {
        return Err(Error::BadValue {
            path: path.to_path_buf(),
            key: "components",
            value: format!("{} (expected 1 for a scalar volume)", header.components),
        });
    }
    Volume3D::from_data(header.dim_size, header.spacing, data)
}

/// Save a scalar volume next to `path` with the given element type.
pub fn save_volume(path: &Path, v: &Volume3D, element_type: ElementType) -> Result<()> {
    write_payload(path, v.dims(), v.spacing(), 1, element_type, v.data())
}
