//! Synthetic pinhole camera and anti-aliased rasterizer for the robot, plus
//! binary PPM (P6) encoding of RGB images.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::Point3;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation, row-major.
    pub rotation: [[f64; 3]; 3],
    /// World-to-camera translation.
    pub translation: [f64; 3],
    pub width: usize,
    pub height: usize,
}

impl Camera {
    /// Side-on view of a robot of length `length` standing on +z: the camera
    /// sits at distance `3·length` on −y, level with the mid-height of the
    /// robot, image x along world x and image rows down world z.
    pub fn side_on(length: f64, width: usize, height: usize) -> Self {
        let f = 1.75 * width.min(height) as f64;
        Self {
            fx: f,
            fy: f,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            rotation: [[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]],
            translation: [0.0, length / 2.0, 3.0 * length],
            width,
            height,
        }
    }

    pub fn to_camera(&self, p: &Point3) -> Point3 {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + t[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + t[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + t[2],
        ]
    }
}

/// Pinhole projection to pixel coordinates `(u, v)`.
pub fn project(p: &Point3, cam: &Camera) -> Result<(f64, f64)> {
    let c = cam.to_camera(p);
    if !(c[2] > 0.0) {
        return Err(Error::Projection {
            what: format!("point {p:?}"),
            depth: c[2],
        });
    }
    Ok((cam.fx * c[0] / c[2] + cam.cx, cam.fy * c[1] / c[2] + cam.cy))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderOptions {
    /// Backbone stroke radius in pixels.
    pub stroke_radius: f64,
    /// Marker disk radius in pixels.
    pub marker_radius: f64,
    pub background: [f64; 3],
    pub stroke_color: [f64; 3],
    pub marker_color: [f64; 3],
    pub gain: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            stroke_radius: 1.5,
            marker_radius: 2.0,
            background: [0.1, 0.1, 0.12],
            stroke_color: [0.85, 0.85, 0.8],
            marker_color: [0.95, 0.15, 0.1],
            gain: 1.0,
            noise_sigma: 0.01,
            seed: 0,
        }
    }
}

impl RenderOptions {
    pub fn validate(&self) -> Result<()> {
        if self.stroke_radius < 1.0 || self.marker_radius < 1.0 {
            return Err(Error::Parameter("stroke and marker radii must be at least 1 px".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Parameter("noise sigma must be non-negative".into()));
        }
        Ok(())
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    ((p.0 - a.0 - t * dx).powi(2) + (p.1 - a.1 - t * dy).powi(2)).sqrt()
}

/// Coverage of a pixel by a shape whose edge lies `d - radius` pixels away.
fn coverage(d: f64, radius: f64) -> f64 {
    (radius + 0.5 - d).clamp(0.0, 1.0)
}

fn project_all(points: &[Point3], cam: &Camera, label: &str) -> Result<Vec<(f64, f64)>> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            project(p, cam).map_err(|e| match e {
                Error::Projection { depth, .. } => Error::Projection {
                    what: format!("{label} sample {i} {p:?}"),
                    depth,
                },
                other => other,
            })
        })
        .collect()
}

/// Draw the backbone polyline and marker disks into an `[H, W, 3]` image.
pub fn render(markers: &[Point3], backbone: &[Point3], cam: &Camera, opts: &RenderOptions) -> Result<Tensor> {
    opts.validate()?;
    let line = project_all(backbone, cam, "backbone")?;
    let dots = project_all(markers, cam, "marker")?;
    let (h, w) = (cam.height, cam.width);
    let mut img = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            let mut px = opts.background;
            if !line.is_empty() {
                let d = if line.len() == 1 {
                    segment_distance(p, line[0], line[0])
                } else {
                    line.windows(2)
                        .map(|s| segment_distance(p, s[0], s[1]))
                        .fold(f64::INFINITY, f64::min)
                };
                let a = coverage(d, opts.stroke_radius);
                for (c, s) in px.iter_mut().zip(opts.stroke_color) {
                    *c += a * (s - *c);
                }
            }
            for &m in &dots {
                let a = coverage(segment_distance(p, m, m), opts.marker_radius);
                if a > 0.0 {
                    for (c, s) in px.iter_mut().zip(opts.marker_color) {
                        *c += a * (s - *c);
                    }
                }
            }
            img.extend(px.iter().map(|c| c * opts.gain));
        }
    }
    if opts.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let normal = Normal::new(0.0, opts.noise_sigma).map_err(|e| Error::Parameter(e.to_string()))?;
        for v in &mut img {
            *v += normal.sample(&mut rng);
        }
    }
    for v in &mut img {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::new(vec![h, w, 3], img)
}

/// Encode an `[H, W, 3]` image in [0, 1] as binary PPM with maxval 255.
pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    let (h, w, c) = img.dims3("encode_ppm")?;
    if c != 3 {
        return Err(Error::dim("encode_ppm", "channels", 3, c));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(img.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

/// Decode binary PPM (P6, maxval 255) to an `[H, W, 3]` image in [0, 1].
pub fn decode_ppm(bytes: &[u8], file: &str) -> Result<Tensor> {
    let perr = |line: usize, msg: &str| Error::Parse {
        file: file.to_string(),
        line,
        msg: msg.to_string(),
    };
    // Header: magic, width, height, maxval separated by whitespace, with
    // optional comment lines; one whitespace byte precedes the raster.
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    let mut line = 1;
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            }
            if pos < bytes.len() && bytes[pos] == b'\n' {
                line += 1;
            }
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(perr(line, "truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| perr(line, "non-ascii header"))?);
    }
    if fields[0] != "P6" {
        return Err(perr(1, "expected P6 magic"));
    }
    let parse = |s: &str, what: &str| s.parse::<usize>().map_err(|_| perr(line, &format!("bad {what} {s:?}")));
    let w = parse(fields[1], "width")?;
    let h = parse(fields[2], "height")?;
    let maxval = parse(fields[3], "maxval")?;
    if maxval != 255 {
        return Err(perr(line, "only maxval 255 is supported"));
    }
    if w == 0 || h == 0 {
        return Err(perr(line, "zero image size"));
    }
    pos += 1;
    let need = w * h * 3;
    if bytes.len() < pos + need {
        return Err(perr(line + 1, &format!("truncated raster: need {need} bytes, have {}", bytes.len().saturating_sub(pos))));
    }
    let data = bytes[pos..pos + need].iter().map(|&b| f64::from(b) / 255.0).collect();
    Tensor::new(vec![h, w, 3], data)
}

pub fn write_ppm(path: &Path, img: &Tensor) -> Result<()> {
    std::fs::write(path, encode_ppm(img)?).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes, &path.display().to_string())
}

/// Quantize to the 8-bit grid used on disk.
pub fn quantize(img: &Tensor) -> Tensor {
    img.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}
