use std::fmt;

use serde::{Deserialize, Serialize};

use super::grammar::{Link, ParsedPrompt, Phrase, Predicate};
use crate::error::{Error, Result};

/// Largest gap, in pixels along either axis, at which two boxes count as
/// next to each other.
pub const NEXT_TO_GAP: f64 = 24.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Blue,
    Green,
    Yellow,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    #[default]
    Solid,
    Striped,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }

    pub fn from_name(s: &str) -> Option<Shape> {
        Shape::ALL.into_iter().find(|x| x.name() == s)
    }

    /// Next shape in a fixed cycle, used by the shape-change corruption.
    pub fn next(self) -> Shape {
        match self {
            Shape::Square => Shape::Circle,
            Shape::Circle => Shape::Triangle,
            Shape::Triangle => Shape::Square,
        }
    }
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Blue, Color::Green, Color::Yellow];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Blue => "blue",
            Color::Green => "green",
            Color::Yellow => "yellow",
        }
    }

    pub fn from_name(s: &str) -> Option<Color> {
        Color::ALL.into_iter().find(|x| x.name() == s)
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 30, 30],
            Color::Blue => [30, 60, 220],
            Color::Green => [30, 170, 60],
            Color::Yellow => [235, 200, 20],
        }
    }
}

impl Texture {
    pub fn name(self) -> &'static str {
        match self {
            Texture::Solid => "solid",
            Texture::Striped => "striped",
        }
    }

    pub fn from_name(s: &str) -> Option<Texture> {
        [Texture::Solid, Texture::Striped]
            .into_iter()
            .find(|x| x.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl Rect {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x0 + self.x1) as f64 / 2.0,
            (self.y0 + self.y1) as f64 / 2.0,
        )
    }

    pub fn area(&self) -> u64 {
        self.x1.saturating_sub(self.x0) as u64 * self.y1.saturating_sub(self.y0) as u64
    }

    pub fn intersection_area(&self, other: &Rect) -> u64 {
        let w = self.x1.min(other.x1).saturating_sub(self.x0.max(other.x0));
        let h = self.y1.min(other.y1).saturating_sub(self.y0.max(other.y0));
        w as u64 * h as u64
    }

    fn gap(&self, other: &Rect) -> f64 {
        let gx = (self.x0.max(other.x0) as f64 - self.x1.min(other.x1) as f64).max(0.0);
        let gy = (self.y0.max(other.y0) as f64 - self.y1.min(other.y1) as f64).max(0.0);
        gx.max(gy)
    }
}

pub fn predicate_holds(pred: Predicate, subject: &Rect, object: &Rect) -> bool {
    let (sx, sy) = subject.center();
    let (ox, oy) = object.center();
    match pred {
        Predicate::LeftOf => sx < ox,
        Predicate::RightOf => sx > ox,
        Predicate::Above => sy < oy,
        Predicate::Below => sy > oy,
        Predicate::NextTo => subject.gap(object) <= NEXT_TO_GAP,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    #[serde(default)]
    pub texture: Texture,
    #[serde(rename = "box")]
    pub rect: Rect,
}

impl SceneObject {
    pub fn new(shape: Shape, color: Color, texture: Texture, rect: Rect) -> Self {
        Self {
            shape,
            color,
            texture,
            rect,
        }
    }

    /// Whether a single attribute word describes this object.
    pub fn has_attribute(&self, attr: &str) -> Result<bool> {
        if let Some(c) = Color::from_name(attr) {
            Ok(c == self.color)
        } else if let Some(t) = Texture::from_name(attr) {
            Ok(t == self.texture)
        } else {
            Err(Error::Parse(format!("unknown attribute {attr:?}")))
        }
    }

    /// A prompt phrase matches when the noun names the shape and every
    /// stated attribute holds.
    pub fn matches_phrase(&self, phrase: &Phrase) -> Result<bool> {
        let Some(shape) = Shape::from_name(&phrase.noun) else {
            return Err(Error::Parse(format!("unknown shape {:?}", phrase.noun)));
        };
        if shape != self.shape {
            return Ok(false);
        }
        for a in &phrase.attributes {
            if !self.has_attribute(a)? {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub subject: usize,
    pub predicate: Predicate,
    pub object: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: u32,
    pub height: u32,
    pub objects: Vec<SceneObject>,
    #[serde(default)]
    pub relations: Vec<Relation>,
    pub prompt_text: String,
}

fn describe(o: &SceneObject) -> String {
    match o.texture {
        Texture::Solid => format!("a {} {}", o.color.name(), o.shape.name()),
        Texture::Striped => format!("a {} striped {}", o.color.name(), o.shape.name()),
    }
}

/// Renders the canonical prompt: objects in order, consecutive objects
/// joined by their relation's phrase or by `and`. Relations must link
/// consecutive objects.
pub fn render_prompt(objects: &[SceneObject], relations: &[Relation]) -> Result<String> {
    if objects.is_empty() {
        return Err(Error::Scene("scene has no objects".into()));
    }
    let mut links: Vec<Option<Predicate>> = vec![None; objects.len() - 1];
    for r in relations {
        let (slot, pred) = if r.object == r.subject + 1 {
            (r.subject, r.predicate)
        } else if r.subject == r.object + 1 {
            (r.object, r.predicate.inverse())
        } else {
            return Err(Error::Scene(format!(
                "relation {} -> {} does not link consecutive objects",
                r.subject, r.object
            )));
        };
        if links[slot].replace(pred).is_some() {
            return Err(Error::Scene(format!(
                "objects {slot} and {} have two relations",
                slot + 1
            )));
        }
    }
    let mut out = describe(&objects[0]);
    for (i, o) in objects.iter().enumerate().skip(1) {
        let join = links[i - 1].map_or("and", |p| p.phrase());
        out.push(' ');
        out.push_str(join);
        out.push(' ');
        out.push_str(&describe(o));
    }
    Ok(out)
}

impl SceneSpec {
    /// Builds a validated spec and renders its prompt.
    pub fn new(
        width: u32,
        height: u32,
        objects: Vec<SceneObject>,
        relations: Vec<Relation>,
    ) -> Result<Self> {
        let prompt_text = render_prompt(&objects, &relations)?;
        let spec = Self {
            width,
            height,
            objects,
            relations,
            prompt_text,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Structural validity: boxes inside the canvas and pairwise disjoint,
    /// relations in range and true of the boxes.
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Scene("empty canvas".into()));
        }
        for (i, o) in self.objects.iter().enumerate() {
            let r = &o.rect;
            if r.x0 >= r.x1 || r.y0 >= r.y1 || r.x1 > self.width || r.y1 > self.height {
                return Err(Error::Scene(format!(
                    "object {i} box {r:?} is degenerate or off-canvas"
                )));
            }
            for (j, p) in self.objects.iter().enumerate().skip(i + 1) {
                if r.intersection_area(&p.rect) > 0 {
                    return Err(Error::Scene(format!("objects {i} and {j} overlap")));
                }
            }
        }
        for rel in &self.relations {
            let (Some(s), Some(o)) = (self.objects.get(rel.subject), self.objects.get(rel.object))
            else {
                return Err(Error::Scene(format!(
                    "relation {rel:?} refers to a missing object"
                )));
            };
            if rel.subject == rel.object {
                return Err(Error::Scene(format!("relation {rel:?} is reflexive")));
            }
            if !predicate_holds(rel.predicate, &s.rect, &o.rect) {
                return Err(Error::Scene(format!(
                    "relation {rel:?} is false of the boxes"
                )));
            }
        }
        Ok(())
    }

    /// True when `prompt_text` is exactly what the spec renders to.
    pub fn prompt_is_consistent(&self) -> bool {
        render_prompt(&self.objects, &self.relations).is_ok_and(|p| p == self.prompt_text)
    }
}

/// Whether some injective assignment of prompt phrases to `objects`
/// satisfies every phrase and every link.
pub fn prompt_holds(prompt: &ParsedPrompt, objects: &[&SceneObject]) -> Result<bool> {
    let n = prompt.phrases.len();
    let mut candidates = Vec::with_capacity(n);
    for ph in &prompt.phrases {
        let mut c = Vec::new();
        for (k, o) in objects.iter().enumerate() {
            if o.matches_phrase(ph)? {
                c.push(k);
            }
        }
        candidates.push(c);
    }
    let mut chosen = Vec::with_capacity(n);
    Ok(assign(prompt, objects, &candidates, &mut chosen))
}

fn assign(
    prompt: &ParsedPrompt,
    objects: &[&SceneObject],
    candidates: &[Vec<usize>],
    chosen: &mut Vec<usize>,
) -> bool {
    let i = chosen.len();
    if i == candidates.len() {
        return true;
    }
    for &k in &candidates[i] {
        if chosen.contains(&k) {
            continue;
        }
        if i > 0 {
            if let Link::Spatial(p) = prompt.links[i - 1] {
                if !predicate_holds(p, &objects[chosen[i - 1]].rect, &objects[k].rect) {
                    continue;
                }
            }
        }
        chosen.push(k);
        if assign(prompt, objects, candidates, chosen) {
            return true;
        }
        chosen.pop();
    }
    false
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    SwapColors,
    SwapPositions,
    DropObject,
    ChangeShape,
    ChangeTexture,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 5] = [
        CorruptionKind::SwapColors,
        CorruptionKind::SwapPositions,
        CorruptionKind::DropObject,
        CorruptionKind::ChangeShape,
        CorruptionKind::ChangeTexture,
    ];

    pub fn arity(self) -> usize {
        match self {
            CorruptionKind::SwapColors | CorruptionKind::SwapPositions => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corruption {
    pub kind: CorruptionKind,
    pub targets: Vec<usize>,
}

impl fmt::Display for Corruption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}{:?}", self.kind, self.targets)
    }
}

/// Applies a corruption. The returned spec keeps the original prompt text,
/// drops relations that no longer hold, and is guaranteed to violate at
/// least one assertion of that prompt; a corruption that would leave the
/// prompt satisfied is rejected.
pub fn corrupt(spec: &SceneSpec, c: &Corruption) -> Result<SceneSpec> {
    if c.targets.len() != c.kind.arity() {
        return Err(Error::InvalidInput(format!(
            "{c} needs {} target(s)",
            c.kind.arity()
        )));
    }
    if let Some(&t) = c.targets.iter().find(|&&t| t >= spec.objects.len()) {
        return Err(Error::InvalidInput(format!("{c}: target {t} out of range")));
    }
    if c.targets.len() == 2 && c.targets[0] == c.targets[1] {
        return Err(Error::InvalidInput(format!("{c}: targets must differ")));
    }
    let mut out = spec.clone();
    match c.kind {
        CorruptionKind::SwapColors => {
            let (a, b) = (c.targets[0], c.targets[1]);
            let tmp = out.objects[a].color;
            out.objects[a].color = out.objects[b].color;
            out.objects[b].color = tmp;
        }
        CorruptionKind::SwapPositions => {
            let (a, b) = (c.targets[0], c.targets[1]);
            let tmp = out.objects[a].rect;
            out.objects[a].rect = out.objects[b].rect;
            out.objects[b].rect = tmp;
        }
        CorruptionKind::DropObject => {
            let t = c.targets[0];
            out.objects.remove(t);
            out.relations = out
                .relations
                .iter()
                .filter(|r| r.subject != t && r.object != t)
                .map(|r| Relation {
                    subject: r.subject - (r.subject > t) as usize,
                    predicate: r.predicate,
                    object: r.object - (r.object > t) as usize,
                })
                .collect();
        }
        CorruptionKind::ChangeShape => {
            let o = &mut out.objects[c.targets[0]];
            o.shape = o.shape.next();
        }
        CorruptionKind::ChangeTexture => {
            let o = &mut out.objects[c.targets[0]];
            o.texture = match o.texture {
                Texture::Solid => Texture::Striped,
                Texture::Striped => Texture::Solid,
            };
        }
    }
    let objects = out.objects.clone();
    out.relations.retain(|r| {
        predicate_holds(
            r.predicate,
            &objects[r.subject].rect,
            &objects[r.object].rect,
        )
    });
    out.validate()?;

    let prompt = super::grammar::parse_prompt(&spec.prompt_text)?;
    let refs: Vec<&SceneObject> = out.objects.iter().collect();
    if prompt_holds(&prompt, &refs)? {
        return Err(Error::InvalidInput(format!(
            "{c} leaves every assertion of {:?} satisfied",
            spec.prompt_text
        )));
    }
    Ok(out)
}
