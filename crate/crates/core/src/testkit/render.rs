use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::scene::{Color, SceneObject, SceneSpec, Shape, Texture};
use crate::error::Result;

const BACKGROUND: [u8; 3] = [255, 255, 255];
const STRIPE_PERIOD: u32 = 4;

/// One entry of a `.boxes.json` sidecar. The first six fields are what a
/// detector sees; `color` and `texture` carry the attribute ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
    pub label: String,
    pub confidence: f64,
    pub color: Color,
    #[serde(default)]
    pub texture: Texture,
}

impl Annotation {
    pub fn from_object(o: &SceneObject) -> Self {
        Self {
            x0: o.rect.x0,
            y0: o.rect.y0,
            x1: o.rect.x1,
            y1: o.rect.y1,
            label: o.shape.name().to_string(),
            confidence: 1.0,
            color: o.color,
            texture: o.texture,
        }
    }
}

fn inside(shape: Shape, o: &SceneObject, x: u32, y: u32) -> bool {
    let r = &o.rect;
    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
    let (w, h) = ((r.x1 - r.x0) as f64, (r.y1 - r.y0) as f64);
    let (cx, cy) = r.center();
    match shape {
        Shape::Square => true,
        Shape::Circle => {
            let (dx, dy) = ((px - cx) / (w / 2.0), (py - cy) / (h / 2.0));
            dx * dx + dy * dy <= 1.0
        }
        Shape::Triangle => {
            let t = (py - r.y0 as f64) / h;
            (px - cx).abs() <= t * w / 2.0
        }
    }
}

fn stripe_tint(c: [u8; 3]) -> [u8; 3] {
    c.map(|v| ((v as u16 + 255) / 2) as u8)
}

/// Rasterizes the scene. Validates the spec first.
pub fn render_image(spec: &SceneSpec) -> Result<RgbImage> {
    spec.validate()?;
    let mut img = RgbImage::from_pixel(spec.width, spec.height, Rgb(BACKGROUND));
    for o in &spec.objects {
        let base = o.color.rgb();
        for y in o.rect.y0..o.rect.y1 {
            let striped_row =
                o.texture == Texture::Striped && ((y - o.rect.y0) / STRIPE_PERIOD) % 2 == 1;
            let c = if striped_row { stripe_tint(base) } else { base };
            for x in o.rect.x0..o.rect.x1 {
                if inside(o.shape, o, x, y) {
                    img.put_pixel(x, y, Rgb(c));
                }
            }
        }
    }
    Ok(img)
}

pub fn annotations(spec: &SceneSpec) -> Vec<Annotation> {
    spec.objects.iter().map(Annotation::from_object).collect()
}

/// Sidecar path for an image: the full file name plus `.boxes.json`.
pub fn sidecar_path(image: &Path) -> PathBuf {
    let mut name = image.file_name().unwrap_or_default().to_os_string();
    name.push(".boxes.json");
    image.with_file_name(name)
}

/// Writes the PNG and its `.boxes.json` sidecar. Returns the sidecar path.
pub fn render_scene(spec: &SceneSpec, image_path: &Path) -> Result<PathBuf> {
    let img = render_image(spec)?;
    if let Some(dir) = image_path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let bytes = crate::image_decomp::encode_png(&img)?;
    std::fs::write(image_path, bytes)?;
    let sidecar = sidecar_path(image_path);
    std::fs::write(&sidecar, serde_json::to_vec_pretty(&annotations(spec))?)?;
    Ok(sidecar)
}

pub fn read_annotations(image_path: &Path) -> Result<Vec<Annotation>> {
    let bytes = std::fs::read(sidecar_path(image_path))?;
    Ok(serde_json::from_slice(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::super::scene::Rect;
    use super::*;
    use crate::error::Error;

    fn one_square() -> SceneSpec {
        SceneSpec::new(
            100,
            100,
            vec![SceneObject::new(
                Shape::Square,
                Color::Red,
                Texture::Solid,
                Rect::new(10, 10, 50, 50),
            )],
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn single_square_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.png");
        let sidecar = render_scene(&one_square(), &path).unwrap();
        assert_eq!(sidecar, dir.path().join("scene.png.boxes.json"));
        let ann = read_annotations(&path).unwrap();
        assert_eq!(ann.len(), 1);
        assert_eq!(
            (ann[0].x0, ann[0].y0, ann[0].x1, ann[0].y1),
            (10, 10, 50, 50)
        );
        let img = image::open(&path).unwrap().to_rgb8();
        assert_eq!(img.get_pixel(30, 30).0, Color::Red.rgb());
        assert_eq!(img.get_pixel(5, 5).0, BACKGROUND);
    }

    #[test]
    fn rendering_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
        render_scene(&one_square(), &a).unwrap();
        render_scene(&one_square(), &b).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }

    #[test]
    fn overlapping_spec_is_rejected() {
        let mut s = one_square();
        s.objects.push(SceneObject::new(
            Shape::Circle,
            Color::Blue,
            Texture::Solid,
            Rect::new(40, 40, 80, 80),
        ));
        assert!(matches!(render_image(&s), Err(Error::Scene(_))));
    }

    #[test]
    fn detector_schema_reads_sidecar() {
        let json = serde_json::to_string(&annotations(&one_square())).unwrap();
        let dets: Vec<crate::image_decomp::Detection> = serde_json::from_str(&json).unwrap();
        assert_eq!(dets[0].label, "square");
        assert_eq!(dets[0].x1, 50.0);
    }
}
