//! Analytic ground-truth scenes, multi-view dataset generation and IO, and
//! visual hulls.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::Rng;
use rayon::prelude::*;

use crate::camera::{add, cross, dot, format_cameras, norm, normalize, parse_cameras, scale, sub, Camera, Mat3, Ray, Vec3};
use crate::error::{Error, Result};
use crate::mesh::{chamfer_l1, marching_cubes, sample_surface as sample_mesh, Bounds, EvalReport, ScalarGrid, TriangleMesh};
use crate::raycast::Rendering;
use crate::registry::Registry;

/// Signed distance to a surface: negative inside.
#[derive(Debug, Clone, PartialEq)]
pub enum Sdf {
    Sphere { radius: f64 },
    /// Axis-aligned box given by its half extents.
    Box { half: Vec3 },
    /// Ring around the local z axis.
    Torus { major: f64, minor: f64 },
    Union(Vec<Sdf>),
    /// Points of the first shape not inside the second.
    Subtract(Box<Sdf>, Box<Sdf>),
    /// `inner` scaled, then rotated by `rotation` (local to world), then
    /// translated.
    Posed { inner: Box<Sdf>, rotation: Mat3, translation: Vec3, scale: f64 },
}

fn mat_t_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [0, 1, 2].map(|j| m[0][j] * v[0] + m[1][j] * v[1] + m[2][j] * v[2])
}

fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

/// Rotation by `angle` radians about the x axis.
pub fn rotation_x(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

impl Sdf {
    pub fn distance(&self, p: Vec3) -> f64 {
        match self {
            Sdf::Sphere { radius } => norm(p) - radius,
            Sdf::Box { half } => {
                let q = [0, 1, 2].map(|i| p[i].abs() - half[i]);
                let outside = norm(q.map(|v| v.max(0.0)));
                outside + q[0].max(q[1]).max(q[2]).min(0.0)
            }
            Sdf::Torus { major, minor } => {
                let ring = (p[0] * p[0] + p[1] * p[1]).sqrt() - major;
                (ring * ring + p[2] * p[2]).sqrt() - minor
            }
            Sdf::Union(parts) => parts.iter().map(|s| s.distance(p)).fold(f64::INFINITY, f64::min),
            Sdf::Subtract(a, b) => a.distance(p).max(-b.distance(p)),
            Sdf::Posed { inner, rotation, translation, scale: s } => {
                s * inner.distance(crate::camera::scale(mat_t_vec(rotation, sub(p, *translation)), 1.0 / s))
            }
        }
    }

    /// Outward unit normal by central differences.
    pub fn normal(&self, p: Vec3) -> Vec3 {
        let h = 1e-6;
        normalize([0, 1, 2].map(|i| {
            let mut a = p;
            let mut b = p;
            a[i] += h;
            b[i] -= h;
            self.distance(a) - self.distance(b)
        }))
    }

    /// Uniform samples on this shape's own surface, before composition.
    fn sample_parts<R: Rng + ?Sized>(&self, count: usize, rng: &mut R, out: &mut Vec<Vec3>) {
        match self {
            Sdf::Sphere { radius } => {
                for _ in 0..count {
                    out.push(scale(unit_vector(rng), *radius));
                }
            }
            Sdf::Box { half } => {
                let areas = [half[1] * half[2], half[0] * half[2], half[0] * half[1]];
                let total: f64 = areas.iter().sum();
                for _ in 0..count {
                    let mut u = rng.random::<f64>() * total;
                    let mut axis = 0;
                    while axis < 2 && u >= areas[axis] {
                        u -= areas[axis];
                        axis += 1;
                    }
                    let mut p = [0, 1, 2].map(|i| rng.random_range(-half[i]..=half[i]));
                    p[axis] = if rng.random::<bool>() { half[axis] } else { -half[axis] };
                    out.push(p);
                }
            }
            Sdf::Torus { major, minor } => {
                let mut n = 0;
                while n < count {
                    let (u, v) = (rng.random::<f64>() * 2.0 * PI, rng.random::<f64>() * 2.0 * PI);
                    // Area element is proportional to major + minor cos(v).
                    if rng.random::<f64>() * (major + minor) > major + minor * v.cos() {
                        continue;
                    }
                    let ring = major + minor * v.cos();
                    out.push([ring * u.cos(), ring * u.sin(), minor * v.sin()]);
                    n += 1;
                }
            }
            Sdf::Union(parts) => {
                let areas: Vec<f64> = parts.iter().map(Sdf::part_area).collect();
                let total: f64 = areas.iter().sum();
                for (s, a) in parts.iter().zip(areas) {
                    s.sample_parts((count as f64 * a / total).ceil() as usize, rng, out);
                }
            }
            Sdf::Subtract(a, b) => {
                let (aa, ab) = (a.part_area(), b.part_area());
                a.sample_parts((count as f64 * aa / (aa + ab)).ceil() as usize, rng, out);
                b.sample_parts((count as f64 * ab / (aa + ab)).ceil() as usize, rng, out);
            }
            Sdf::Posed { inner, rotation, translation, scale: s } => {
                let start = out.len();
                inner.sample_parts(count, rng, out);
                for p in &mut out[start..] {
                    *p = add(mat_vec(rotation, scale(*p, *s)), *translation);
                }
            }
        }
    }

    fn part_area(&self) -> f64 {
        match self {
            Sdf::Sphere { radius } => 4.0 * PI * radius * radius,
            Sdf::Box { half } => 8.0 * (half[0] * half[1] + half[1] * half[2] + half[0] * half[2]),
            Sdf::Torus { major, minor } => 4.0 * PI * PI * major * minor,
            Sdf::Union(parts) => parts.iter().map(Sdf::part_area).sum(),
            Sdf::Subtract(a, b) => a.part_area() + b.part_area(),
            Sdf::Posed { inner, scale: s, .. } => s * s * inner.part_area(),
        }
    }

    /// Uniform samples on the composite surface: primitive surface samples
    /// that lie on the zero level set of the whole expression.
    pub fn sample_surface<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<Vec3> {
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let mut batch = Vec::new();
            self.sample_parts(count, rng, &mut batch);
            out.extend(batch.into_iter().filter(|p| self.distance(*p).abs() < 1e-9));
        }
        out.truncate(count);
        out
    }
}

fn unit_vector<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    let z: f64 = rng.random_range(-1.0..=1.0);
    let phi = rng.random::<f64>() * 2.0 * PI;
    let s = (1.0 - z * z).max(0.0).sqrt();
    [s * phi.cos(), s * phi.sin(), z]
}

/// View-independent albedo.
#[derive(Debug, Clone, PartialEq)]
pub enum Texture {
    Solid([f64; 3]),
    /// 3D checkerboard with cubes of edge `size`.
    Checker { a: [f64; 3], b: [f64; 3], size: f64 },
    /// Linear blend from `a` to `b` as `p . axis` goes from `lo` to `hi`.
    Gradient { a: [f64; 3], b: [f64; 3], axis: Vec3, lo: f64, hi: f64 },
}

impl Texture {
    pub fn color(&self, p: Vec3) -> [f64; 3] {
        match self {
            Texture::Solid(c) => *c,
            Texture::Checker { a, b, size } => {
                let k: i64 = p.iter().map(|v| (v / size).floor() as i64).sum();
                if k.rem_euclid(2) == 0 {
                    *a
                } else {
                    *b
                }
            }
            Texture::Gradient { a, b, axis, lo, hi } => {
                let t = ((dot(p, *axis) - lo) / (hi - lo)).clamp(0.0, 1.0);
                [0, 1, 2].map(|i| a[i] + t * (b[i] - a[i]))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticScene {
    pub shape: Sdf,
    pub texture: Texture,
    pub background: [f64; 3],
}

/// Radius of the sphere around the origin that contains every scene.
pub const SCENE_RADIUS: f64 = 1.0;
/// Sphere tracing stops once the distance drops below this.
pub const TRACE_TOL: f64 = 1e-7;
const TRACE_MAX_STEPS: usize = 4096;

pub fn sphere_scene() -> AnalyticScene {
    AnalyticScene {
        shape: Sdf::Sphere { radius: 0.5 },
        texture: Texture::Gradient { a: [0.9, 0.2, 0.1], b: [0.1, 0.3, 0.9], axis: normalize([1.0, 0.5, 1.0]), lo: -0.6, hi: 0.6 },
        background: [1.0, 1.0, 1.0],
    }
}

/// Torus standing on its rim: its axis is horizontal, so the hole faces
/// sideways rather than up toward the cameras.
pub fn torus_scene() -> AnalyticScene {
    AnalyticScene {
        shape: Sdf::Posed {
            inner: Box::new(Sdf::Torus { major: 0.35, minor: 0.12 }),
            rotation: rotation_x(PI / 2.0),
            translation: [0.0; 3],
            scale: 1.0,
        },
        texture: Texture::Checker { a: [0.95, 0.85, 0.2], b: [0.15, 0.2, 0.6], size: 0.1 },
        background: [1.0, 1.0, 1.0],
    }
}

pub fn box_scene() -> AnalyticScene {
    AnalyticScene {
        shape: Sdf::Box { half: [0.3, 0.25, 0.35] },
        texture: Texture::Solid([0.7, 0.4, 0.2]),
        background: [1.0, 1.0, 1.0],
    }
}

/// Box with a spherical bite taken out of one corner.
pub fn carved_box_scene() -> AnalyticScene {
    AnalyticScene {
        shape: Sdf::Subtract(
            Box::new(Sdf::Box { half: [0.35; 3] }),
            Box::new(Sdf::Posed { inner: Box::new(Sdf::Sphere { radius: 0.3 }), rotation: rotation_x(0.0), translation: [0.35, 0.35, 0.35], scale: 1.0 }),
        ),
        texture: Texture::Checker { a: [0.9, 0.9, 0.9], b: [0.2, 0.5, 0.2], size: 0.15 },
        background: [1.0, 1.0, 1.0],
    }
}

/// Chamfer-L1 between `count` area-weighted samples of `mesh` and `count`
/// samples of the analytic surface of `scene`.
pub fn evaluate_mesh<R: Rng + ?Sized>(mesh: &TriangleMesh, scene: &AnalyticScene, count: usize, rng: &mut R) -> Result<EvalReport> {
    let recon = sample_mesh(mesh, count, rng)?;
    let reference = scene.shape.sample_surface(count, rng);
    chamfer_l1(&recon, &reference)
}

pub type SceneFactory = fn() -> AnalyticScene;

/// Built-in scenes by name.
pub fn scene_registry() -> Registry<SceneFactory> {
    Registry::<SceneFactory>::new("scene")
        .with("sphere", sphere_scene)
        .with("torus", torus_scene)
        .with("box", box_scene)
        .with("carved-box", carved_box_scene)
}

/// Depth of the first surface point along `ray` by sphere tracing inside the
/// scene sphere.
pub fn trace(shape: &Sdf, ray: &Ray) -> Option<f64> {
    let clipped = ray.clip_to_sphere([0.0; 3], SCENE_RADIUS)?;
    let mut d = clipped.near;
    for _ in 0..TRACE_MAX_STEPS {
        let dist = shape.distance(ray.at(d));
        if dist < TRACE_TOL {
            return Some(d);
        }
        d += dist;
        if d > clipped.far {
            return None;
        }
    }
    None
}

/// One posed view. Images are row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub camera: Camera,
    pub rgb: Vec<[u8; 3]>,
    pub mask: Vec<bool>,
    /// Euclidean ray distance; infinite outside the mask.
    pub depth: Option<Vec<f64>>,
}

impl View {
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.camera.width + i
    }

    pub fn color(&self, i: usize, j: usize) -> [f64; 3] {
        self.rgb[self.index(i, j)].map(|c| c as f64 / 255.0)
    }

    pub fn in_mask(&self, i: usize, j: usize) -> bool {
        self.mask[self.index(i, j)]
    }

    pub fn depth_at(&self, i: usize, j: usize) -> Option<f64> {
        self.depth.as_ref().map(|d| d[self.index(i, j)]).filter(|d| d.is_finite())
    }

    /// Quantized view of a rendering, with its hit mask and depth.
    pub fn from_rendering(camera: Camera, img: &Rendering) -> Result<Self> {
        let v = View { camera, rgb: img.rgb.iter().map(|c| c.map(quantize)).collect(), mask: img.mask.clone(), depth: Some(img.depth.clone()) };
        v.check_size(img)?;
        Ok(v)
    }

    /// Mean over pixels of the channel-averaged absolute color difference
    /// to `img`.
    pub fn image_l1(&self, img: &Rendering) -> Result<f64> {
        self.check_size(img)?;
        let sum: f64 = self.rgb.iter().zip(&img.rgb).map(|(a, b)| (0..3).map(|c| (a[c] as f64 / 255.0 - b[c]).abs()).sum::<f64>() / 3.0).sum();
        Ok(sum / self.rgb.len() as f64)
    }

    /// Intersection over union of this mask and the hit mask of `img`.
    pub fn mask_iou(&self, img: &Rendering) -> Result<f64> {
        self.check_size(img)?;
        let inter = self.mask.iter().zip(&img.mask).filter(|(a, b)| **a && **b).count();
        let union = self.mask.iter().zip(&img.mask).filter(|(a, b)| **a || **b).count();
        Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
    }

    fn check_size(&self, img: &Rendering) -> Result<()> {
        if (img.width, img.height) != (self.camera.width, self.camera.height) {
            return Err(Error::invalid(format!("rendering is {}x{}, view is {}x{}", img.width, img.height, self.camera.width, self.camera.height)));
        }
        Ok(())
    }
}

pub fn quantize(c: f64) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Sphere-traced image, mask and depth of `scene` seen by `camera`.
pub fn render_ground_truth(scene: &AnalyticScene, camera: &Camera) -> Result<View> {
    let (w, h) = (camera.width, camera.height);
    let pixels: Vec<(Option<f64>, [f64; 3])> = (0..w * h)
        .into_par_iter()
        .map(|k| {
            let ray = camera.pixel_to_ray(Camera::pixel_center(k % w, k / w))?;
            Ok(match trace(&scene.shape, &ray) {
                Some(d) => (Some(d), scene.texture.color(ray.at(d))),
                None => (None, scene.background),
            })
        })
        .collect::<Result<_>>()?;
    Ok(View {
        camera: camera.clone(),
        rgb: pixels.iter().map(|(_, c)| c.map(quantize)).collect(),
        mask: pixels.iter().map(|(d, _)| d.is_some()).collect(),
        depth: Some(pixels.iter().map(|(d, _)| d.unwrap_or(f64::INFINITY)).collect()),
    })
}

/// Placement of generated cameras.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraRig {
    pub count: usize,
    pub distance: (f64, f64),
    pub width: usize,
    pub height: usize,
    /// Focal length as a multiple of the image width.
    pub focal_factor: f64,
}

impl CameraRig {
    pub fn new(count: usize, resolution: usize) -> Self {
        CameraRig { count, distance: (2.0, 2.5), width: resolution, height: resolution, focal_factor: 1.0 }
    }
}

/// Cameras at uniformly random directions on the upper hemisphere (z >= 0)
/// and uniform distances, all looking at the origin with +z up.
pub fn generate_cameras<R: Rng + ?Sized>(rig: &CameraRig, rng: &mut R) -> Result<Vec<Camera>> {
    let (lo, hi) = rig.distance;
    if rig.count == 0 {
        return Err(Error::invalid("need at least one camera"));
    }
    if !(lo > 0.0 && lo <= hi) {
        return Err(Error::invalid(format!("camera distance range must satisfy 0 < min <= max, got [{lo}, {hi}]")));
    }
    (0..rig.count)
        .map(|_| {
            let z: f64 = rng.random();
            let phi = rng.random::<f64>() * 2.0 * PI;
            let s = (1.0 - z * z).sqrt();
            let dist = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            let eye = scale([s * phi.cos(), s * phi.sin(), z], dist);
            Camera::look_at(eye, [0.0; 3], [0.0, 0.0, 1.0], rig.focal_factor * rig.width as f64, rig.width, rig.height)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewDataset {
    pub views: Vec<View>,
}

impl MultiViewDataset {
    pub fn validate(&self) -> Result<()> {
        let first = self.views.first().ok_or_else(|| Error::invalid("dataset has no views"))?;
        let (w, h) = (first.camera.width, first.camera.height);
        for (k, v) in self.views.iter().enumerate() {
            if (v.camera.width, v.camera.height) != (w, h) {
                return Err(Error::invalid(format!("view {k} is {}x{}, expected {w}x{h}", v.camera.width, v.camera.height)));
            }
            if v.rgb.len() != w * h || v.mask.len() != w * h {
                return Err(Error::invalid(format!("view {k} image size does not match its camera")));
            }
            if let Some(d) = &v.depth {
                if d.len() != w * h {
                    return Err(Error::invalid(format!("view {k} depth size does not match its camera")));
                }
                if d.iter().zip(&v.mask).any(|(d, m)| d.is_finite() != *m) {
                    return Err(Error::invalid(format!("view {k}: mask and finite depth disagree")));
                }
            }
        }
        Ok(())
    }

    pub fn has_depth(&self) -> bool {
        self.views.iter().all(|v| v.depth.is_some())
    }

    pub fn cameras(&self) -> Vec<Camera> {
        self.views.iter().map(|v| v.camera.clone()).collect()
    }
}

/// Renders `scene` from freshly generated cameras.
pub fn generate_dataset<R: Rng + ?Sized>(scene: &AnalyticScene, rig: &CameraRig, rng: &mut R) -> Result<MultiViewDataset> {
    let cameras = generate_cameras(rig, rng)?;
    let views = cameras.iter().map(|c| render_ground_truth(scene, c)).collect::<Result<_>>()?;
    Ok(MultiViewDataset { views })
}

const DEPTH_MAGIC: &[u8; 4] = b"DPTH";
const DEPTH_VERSION: u32 = 1;

/// Depth map file: `DPTH`, then version, width, height as u32 LE, then
/// `width * height` f32 LE values, row-major, infinity for background.
pub fn write_depth<W: Write>(depth: &[f64], width: usize, height: usize, mut w: W) -> std::io::Result<()> {
    w.write_all(DEPTH_MAGIC)?;
    for v in [DEPTH_VERSION, width as u32, height as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    for d in depth {
        w.write_all(&(*d as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_depth<R: Read>(mut r: R, path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bad = |msg: &str| Error::format(path, msg.to_string());
    let mut head = [0u8; 16];
    r.read_exact(&mut head).map_err(|_| bad("truncated header"))?;
    if &head[..4] != DEPTH_MAGIC {
        return Err(bad("missing DPTH magic"));
    }
    let field = |k: usize| u32::from_le_bytes(head[4 + 4 * k..8 + 4 * k].try_into().unwrap());
    if field(0) != DEPTH_VERSION {
        return Err(bad(&format!("unsupported version {}", field(0))));
    }
    let (w, h) = (field(1) as usize, field(2) as usize);
    let mut body = Vec::new();
    r.read_to_end(&mut body).map_err(|e| Error::io(path, e))?;
    if body.len() != 4 * w * h {
        return Err(bad(&format!("expected {} depth values, found {} bytes", w * h, body.len())));
    }
    let values = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    Ok((w, h, values))
}

fn view_file(dir: &Path, stem: &str, k: usize, ext: &str) -> std::path::PathBuf {
    dir.join(format!("{stem}_{k:04}.{ext}"))
}

/// Writes `cameras.txt`, `view_####.png`, `mask_####.png` and, when present,
/// `depth_####.bin`.
pub fn save_dataset(data: &MultiViewDataset, dir: &Path) -> Result<()> {
    data.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cam_path = dir.join("cameras.txt");
    std::fs::write(&cam_path, format_cameras(&data.cameras())).map_err(|e| Error::io(&cam_path, e))?;
    for (k, v) in data.views.iter().enumerate() {
        let (w, h) = (v.camera.width as u32, v.camera.height as u32);
        let rgb = RgbImage::from_fn(w, h, |i, j| Rgb(v.rgb[v.index(i as usize, j as usize)]));
        let path = view_file(dir, "view", k, "png");
        rgb.save(&path).map_err(|e| Error::format(&path, e.to_string()))?;
        let mask = GrayImage::from_fn(w, h, |i, j| Luma([if v.in_mask(i as usize, j as usize) { 255 } else { 0 }]));
        let path = view_file(dir, "mask", k, "png");
        mask.save(&path).map_err(|e| Error::format(&path, e.to_string()))?;
        if let Some(d) = &v.depth {
            let path = view_file(dir, "depth", k, "bin");
            let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            write_depth(d, w as usize, h as usize, std::io::BufWriter::new(file)).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<MultiViewDataset> {
    let cam_path = dir.join("cameras.txt");
    let text = std::fs::read_to_string(&cam_path).map_err(|e| Error::io(&cam_path, e))?;
    let cameras = parse_cameras(&text, &cam_path)?;
    let mut views = Vec::with_capacity(cameras.len());
    for (k, camera) in cameras.into_iter().enumerate() {
        let (w, h) = (camera.width, camera.height);
        let check = |path: &Path, iw: u32, ih: u32| {
            if (iw as usize, ih as usize) != (w, h) {
                Err(Error::format(path, format!("image is {iw}x{ih}, camera says {w}x{h}")))
            } else {
                Ok(())
            }
        };
        let path = view_file(dir, "view", k, "png");
        let rgb = image::open(&path).map_err(|e| Error::format(&path, e.to_string()))?.to_rgb8();
        check(&path, rgb.width(), rgb.height())?;
        let path = view_file(dir, "mask", k, "png");
        let mask = image::open(&path).map_err(|e| Error::format(&path, e.to_string()))?.to_luma8();
        check(&path, mask.width(), mask.height())?;
        let path = view_file(dir, "depth", k, "bin");
        let depth = if path.exists() {
            let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
            let (dw, dh, d) = read_depth(std::io::BufReader::new(file), &path)?;
            check(&path, dw as u32, dh as u32)?;
            Some(d)
        } else {
            None
        };
        views.push(View {
            camera,
            rgb: rgb.pixels().map(|p| p.0).collect(),
            mask: mask.pixels().map(|p| p.0[0] >= 128).collect(),
            depth,
        });
    }
    let data = MultiViewDataset { views };
    data.validate().map_err(|e| Error::format(dir, e.to_string()))?;
    Ok(data)
}

/// Cells whose centers project inside every mask.
#[derive(Debug, Clone)]
pub struct VisualHull {
    pub res: usize,
    pub bounds: Bounds,
    pub occupied: Vec<bool>,
}

impl VisualHull {
    pub fn cell_size(&self) -> f64 {
        (self.bounds.hi[0] - self.bounds.lo[0]) / self.res as f64
    }

    pub fn cell_center(&self, x: usize, y: usize, z: usize) -> Vec3 {
        let c = self.cell_size();
        [x, y, z].map(|v| v as f64 + 0.5).iter().enumerate().fold([0.0; 3], |mut p, (a, v)| {
            p[a] = self.bounds.lo[a] + v * c;
            p
        })
    }

    /// Whether the cell containing `p` is occupied; false outside the bounds.
    pub fn contains(&self, p: Vec3) -> bool {
        let c = self.cell_size();
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let v = ((p[a] - self.bounds.lo[a]) / c).floor();
            if v < 0.0 || v >= self.res as f64 {
                return false;
            }
            idx[a] = v as usize;
        }
        self.occupied[idx[0] + self.res * (idx[1] + self.res * idx[2])]
    }

    /// First depth along the ray at which it enters the hull, stepping a
    /// quarter cell at a time over the ray's interval (clipped to the scene
    /// sphere).
    pub fn entry_depth(&self, ray: &Ray) -> Option<f64> {
        let clipped = ray.clip_to_sphere([0.0; 3], SCENE_RADIUS.max(norm(self.bounds.hi)))?;
        let step = 0.25 * self.cell_size();
        let mut d = clipped.near;
        while d <= clipped.far {
            if self.contains(ray.at(d)) {
                return Some(d);
            }
            d += step;
        }
        None
    }

    /// Closed surface of the occupied cells.
    pub fn mesh(&self) -> TriangleMesh {
        let c = self.cell_size();
        let grid = ScalarGrid {
            dims: [self.res; 3],
            lo: [0, 1, 2].map(|a| self.bounds.lo[a] + 0.5 * c),
            spacing: [c; 3],
            values: self.occupied.iter().map(|&o| if o { 1.0 } else { 0.0 }).collect(),
        };
        marching_cubes(&grid, 0.5)
    }
}

/// Carves a `res^3` grid over the cube `bounds` using every view's mask.
pub fn visual_hull(views: &[View], res: usize, bounds: Bounds) -> Result<VisualHull> {
    if views.is_empty() {
        return Err(Error::invalid("visual hull needs at least one view"));
    }
    let extent = [0, 1, 2].map(|a| bounds.hi[a] - bounds.lo[a]);
    if res == 0 || extent.iter().any(|&e| (e - extent[0]).abs() > 1e-12 || !(e > 0.0)) {
        return Err(Error::invalid("visual hull bounds must be a non-empty cube"));
    }
    let mut hull = VisualHull { res, bounds, occupied: Vec::new() };
    hull.occupied = (0..res * res * res)
        .into_par_iter()
        .map(|k| {
            let p = hull.cell_center(k % res, (k / res) % res, k / (res * res));
            views.iter().all(|v| match v.camera.project(p) {
                Some(proj) => {
                    let (u, w) = (proj.u[0].floor(), proj.u[1].floor());
                    u >= 0.0 && w >= 0.0 && (u as usize) < v.camera.width && (w as usize) < v.camera.height && v.in_mask(u as usize, w as usize)
                }
                None => false,
            })
        })
        .collect();
    Ok(hull)
}

/// Unit vector perpendicular to `v`.
pub fn any_perpendicular(v: Vec3) -> Vec3 {
    let helper = if v[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    normalize(cross(v, helper))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn axis_camera(res: usize, focal: f64) -> Camera {
        // Camera at (0, 0, -2) looking along +z.
        let c = res as f64 / 2.0;
        Camera::new([[focal, 0.0, c], [0.0, focal, c], [0.0, 0.0, 1.0]], [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], [0.0, 0.0, 2.0], res, res).unwrap()
    }

    #[test]
    fn sdf_values() {
        assert!((Sdf::Sphere { radius: 0.5 }.distance([0.0, 0.0, 2.0]) - 1.5).abs() < 1e-15);
        let b = Sdf::Box { half: [1.0, 2.0, 3.0] };
        assert_eq!(b.distance([0.0, 0.0, 0.0]), -1.0);
        assert!((b.distance([2.0, 3.0, 0.0]) - 2f64.sqrt()).abs() < 1e-15);
        let t = Sdf::Torus { major: 0.35, minor: 0.12 };
        assert!((t.distance([0.35, 0.0, 0.0]) + 0.12).abs() < 1e-15);
        assert!((t.distance([0.0, 0.0, 0.0]) - 0.23).abs() < 1e-15);
        let posed = torus_scene().shape;
        assert!((posed.distance([0.0, 0.0, 0.35]) + 0.12).abs() < 1e-12);
        assert!((posed.distance([0.0, 0.35, 0.0]) - (0.35f64.hypot(0.35) - 0.12)).abs() < 1e-12);
    }

    #[test]
    fn surface_samples_lie_on_surface() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for scene in [sphere_scene(), torus_scene(), box_scene(), carved_box_scene()] {
            let pts = scene.shape.sample_surface(2000, &mut rng);
            assert_eq!(pts.len(), 2000);
            assert!(pts.iter().all(|p| scene.shape.distance(*p).abs() < 1e-9));
        }
    }

    #[test]
    fn center_pixel_depth_of_sphere() {
        let cam = axis_camera(128, 128.0);
        let ray = cam.pixel_to_ray([64.0, 64.0]).unwrap();
        let d = trace(&Sdf::Sphere { radius: 0.5 }, &ray).unwrap();
        assert!((d - 1.5).abs() < 1e-6);
    }

    #[test]
    fn sphere_mask_area_matches_projection() {
        // A sphere of radius r at distance D subtends a cone of half-angle
        // asin(r / D); its image is a disk of radius f tan(asin(r / D)).
        let (res, focal) = (128, 128.0);
        let view = render_ground_truth(&sphere_scene(), &axis_camera(res, focal)).unwrap();
        let area = view.mask.iter().filter(|m| **m).count() as f64;
        let radius = focal * (0.25f64).asin().tan();
        let expected = PI * radius * radius;
        assert!((area - expected).abs() / expected < 0.01, "{area} vs {expected}");
    }

    #[test]
    fn ground_truth_is_coherent() {
        let scene = torus_scene();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = generate_dataset(&scene, &CameraRig::new(2, 48), &mut rng).unwrap();
        data.validate().unwrap();
        for v in &data.views {
            for j in 0..48 {
                for i in 0..48 {
                    if let Some(d) = v.depth_at(i, j) {
                        let p = v.camera.unproject_depth(Camera::pixel_center(i, j), d).unwrap();
                        assert!(scene.shape.distance(p).abs() < 1e-6);
                        let c = scene.texture.color(p).map(quantize);
                        assert_eq!(v.rgb[v.index(i, j)], c);
                    }
                }
            }
        }
    }

    #[test]
    fn cameras_on_hemisphere_look_at_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rig = CameraRig::new(24, 64);
        let cams = generate_cameras(&rig, &mut rng).unwrap();
        assert_eq!(cams.len(), 24);
        for c in &cams {
            let e = c.center();
            assert!(e[2] >= 0.0);
            assert!((2.0..=2.5).contains(&norm(e)));
            let to_origin = normalize(scale(e, -1.0));
            assert!(norm(sub(to_origin, c.axis())) < 1e-9);
        }
        assert!(generate_cameras(&CameraRig { count: 0, ..rig.clone() }, &mut rng).is_err());
        assert!(generate_cameras(&CameraRig { distance: (3.0, 2.0), ..rig }, &mut rng).is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = generate_dataset(&sphere_scene(), &CameraRig::new(3, 32), &mut rng).unwrap();
        save_dataset(&data, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        for (a, b) in data.views.iter().zip(&back.views) {
            assert_eq!(a.mask, b.mask);
            assert_eq!(a.rgb, b.rgb);
            for (x, y) in a.depth.as_ref().unwrap().iter().zip(b.depth.as_ref().unwrap()) {
                assert!(x == y || (x - y).abs() / x < 1e-6);
            }
            for (x, y) in a.camera.k.iter().flatten().zip(b.camera.k.iter().flatten()) {
                assert_eq!(x, y);
            }
        }
        std::fs::write(dir.path().join("depth_0001.bin"), b"DPTHxx").unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("depth_0001.bin"), "{err}");
    }

    #[test]
    fn single_view_hull_is_a_frustum() {
        let res = 64;
        let cam = axis_camera(res, 64.0);
        let mut mask = vec![false; res * res];
        for j in 24..40 {
            for i in 24..40 {
                mask[j * res + i] = true;
            }
        }
        let view = View { camera: cam, rgb: vec![[0; 3]; res * res], mask, depth: None };
        let hull = visual_hull(&[view], 32, Bounds::cube(1.0)).unwrap();
        assert!(hull.contains([0.01, 0.01, 0.0]) && hull.contains([0.01, 0.01, 0.9]));
        assert!(!hull.contains([0.9, 0.0, 0.0]));
        // Square mask of half-width 8 px at focal 64: |x| <= (z + 2) / 8.
        assert!(hull.contains([0.2, 0.2, 0.5]) && !hull.contains([0.2, 0.2, -0.5]));
        let ray = Ray::new([0.0, 0.0, -2.0], [0.0, 0.0, 1.0], 1e-6, f64::INFINITY).unwrap();
        let d = hull.entry_depth(&ray).unwrap();
        assert!((d - 1.0).abs() < hull.cell_size());
    }

    #[test]
    fn sphere_hull_close_to_sphere() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let data = generate_dataset(&sphere_scene(), &CameraRig::new(24, 96), &mut rng).unwrap();
        let hull = visual_hull(&data.views, 48, Bounds::cube(0.75)).unwrap();
        let mesh = hull.mesh();
        assert!(mesh.is_watertight());
        let a = crate::mesh::sample_surface(&mesh, 5000, &mut rng).unwrap();
        let b = sphere_scene().shape.sample_surface(5000, &mut rng);
        let r = crate::mesh::chamfer_l1(&a, &b).unwrap();
        assert!(r.chamfer_l1 < 2.0 * hull.cell_size(), "{r}");
        // Every true surface point lies in or next to the hull.
        let c = hull.cell_size();
        let steps = [-c, 0.0, c];
        for p in &b {
            let near = steps.iter().any(|&dx| steps.iter().any(|&dy| steps.iter().any(|&dz| hull.contains(add(*p, [dx, dy, dz])))));
            assert!(near, "{p:?}");
        }
    }
}
