//! Pinhole camera math: depth back-projection, projection, and point-cloud
//! preprocessing.
//!
//! Pixel coordinates follow the image grid directly: column `w` is `U = w`,
//! row `h` is `V = h`. Camera frame is x right, y down, z forward.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.width > 0
            && self.height > 0
            && (0.0..self.width as f64).contains(&self.cx)
            && (0.0..self.height as f64).contains(&self.cy);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid intrinsics {:?}", self)))
        }
    }

    /// Unit-depth ray direction through pixel `(w, h)`.
    pub fn ray(&self, w: f64, h: f64) -> [f64; 3] {
        [(w - self.cx) / self.fx, (h - self.cy) / self.fy, 1.0]
    }
}

/// Metric depth map, row-major `height × width`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
}

impl DepthImage {
    pub fn new(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "depth buffer of {} values for {}x{} image",
                values.len(),
                width,
                height
            )));
        }
        Ok(Self { width, height, values })
    }

    pub fn at(&self, w: usize, h: usize) -> f32 {
        self.values[h * self.width + w]
    }

    /// Valid iff finite and strictly positive.
    pub fn is_valid(&self, w: usize, h: usize) -> bool {
        let z = self.at(w, h);
        z.is_finite() && z > 0.0
    }

    pub fn scaled(&self, s: f32) -> Self {
        Self {
            width: self.width,
            height: self.height,
            values: self.values.iter().map(|v| v * s).collect(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    /// `(h, w)` of the pixel each point came from, when known.
    pub source_pixels: Option<Vec<(u32, u32)>>,
}

impl PointCloud {
    pub fn from_points(points: Vec<[f64; 3]>) -> Self {
        Self {
            points,
            source_pixels: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Flattened `n × 3` buffer in f32.
    pub fn to_f32(&self) -> Vec<f32> {
        self.points.iter().flat_map(|p| p.iter().map(|&c| c as f32)).collect()
    }
}

/// One point per valid pixel: `X = (U - cx) / fx · Z`, `Y = (V - cy) / fy · Z`.
pub fn back_project(depth: &DepthImage, k: &CameraIntrinsics) -> Result<PointCloud> {
    if depth.width != k.width || depth.height != k.height {
        return Err(Error::InvalidArgument(format!(
            "depth is {}x{} but intrinsics are {}x{}",
            depth.width, depth.height, k.width, k.height
        )));
    }
    let mut points = Vec::with_capacity(depth.values.len());
    let mut pixels = Vec::with_capacity(depth.values.len());
    for h in 0..depth.height {
        for w in 0..depth.width {
            if !depth.is_valid(w, h) {
                continue;
            }
            let z = depth.at(w, h) as f64;
            points.push([(w as f64 - k.cx) / k.fx * z, (h as f64 - k.cy) / k.fy * z, z]);
            pixels.push((h as u32, w as u32));
        }
    }
    Ok(PointCloud {
        points,
        source_pixels: Some(pixels),
    })
}

/// Continuous pixel `(w, h)` of a camera-frame point.
pub fn project(point: [f64; 3], k: &CameraIntrinsics) -> Result<(f64, f64)> {
    let [x, y, z] = point;
    if z.is_nan() || z <= 0.0 {
        return Err(Error::InvalidArgument(format!("cannot project point with Z = {z}")));
    }
    Ok((k.fx * x / z + k.cx, k.fy * y / z + k.cy))
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedCloud {
    pub cloud: PointCloud,
    pub centroid: [f64; 3],
    pub scale: f64,
}

/// Center on the centroid and divide by the max distance from it.
/// A degenerate cloud (all points identical) keeps scale 1.
pub fn normalize_cloud(cloud: &PointCloud) -> Result<NormalizedCloud> {
    if cloud.is_empty() {
        return Err(Error::InvalidArgument("cannot normalize an empty cloud".into()));
    }
    let n = cloud.len() as f64;
    let mut c = [0.0; 3];
    for p in &cloud.points {
        for i in 0..3 {
            c[i] += p[i];
        }
    }
    for v in c.iter_mut() {
        *v /= n;
    }
    let radius = cloud
        .points
        .iter()
        .map(|p| ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)).sqrt())
        .fold(0.0, f64::max);
    let scale = if radius > 1e-12 { radius } else { 1.0 };
    let points = cloud
        .points
        .iter()
        .map(|p| [(p[0] - c[0]) / scale, (p[1] - c[1]) / scale, (p[2] - c[2]) / scale])
        .collect();
    Ok(NormalizedCloud {
        cloud: PointCloud {
            points,
            source_pixels: cloud.source_pixels.clone(),
        },
        centroid: c,
        scale,
    })
}

/// Exactly `n` points: a uniform draw without replacement when the cloud is
/// large enough, otherwise every point once plus random repeats.
pub fn subsample(cloud: &PointCloud, n: usize, seed: u64) -> Result<PointCloud> {
    if cloud.is_empty() {
        return Err(Error::InvalidArgument("cannot subsample an empty cloud".into()));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("subsample size must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = cloud.len();
    let picks: Vec<usize> = if len >= n {
        rand::seq::index::sample(&mut rng, len, n).into_vec()
    } else {
        let mut all: Vec<usize> = (0..len).collect();
        all.shuffle(&mut rng);
        all.extend((0..n - len).map(|_| rng.random_range(0..len)));
        all
    };
    Ok(PointCloud {
        points: picks.iter().map(|&i| cloud.points[i]).collect(),
        source_pixels: cloud
            .source_pixels
            .as_ref()
            .map(|px| picks.iter().map(|&i| px[i]).collect()),
    })
}
