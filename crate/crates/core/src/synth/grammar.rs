use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::{TokenId, PERIOD};

/// Surface vocabulary; a token id is an index into this list.
pub const VOCAB: [&str; 59] = [
    "<pad>", ".", "<bos>", "<unk>", // specials
    "a", "an", "there", "is", "photo", "picture", "image", "of", // function words
    "dog", "puppy", "cat", "kitten", "man", "guy", "woman", "lady", "car", "automobile", "ball", "table", "bird",
    "horse", "pony", "boat", "ship", "tree", "chair", "bike", "bicycle", "plate", "cup", "mug", // entities
    "red", "blue", "green", "yellow", "black", "white", "big", "large", "small", "little", "old", "wooden",
    "on", "atop", "under", "below", "near", "beside", "next", "to", "behind", "with", "above",
];

pub const ENTITIES: &[&[&str]] = &[
    &["dog", "puppy"],
    &["cat", "kitten"],
    &["man", "guy"],
    &["woman", "lady"],
    &["car", "automobile"],
    &["ball"],
    &["table"],
    &["bird"],
    &["horse", "pony"],
    &["boat", "ship"],
    &["tree"],
    &["chair"],
    &["bike", "bicycle"],
    &["plate"],
    &["cup", "mug"],
];

pub const ATTRIBUTES: &[&[&str]] = &[
    &["red"],
    &["blue"],
    &["green"],
    &["yellow"],
    &["black"],
    &["white"],
    &["big", "large"],
    &["small", "little"],
    &["old"],
    &["wooden"],
];

/// Relation phrases; each inner slice is one phrasing, possibly multi-word.
pub const RELATIONS: &[&[&[&str]]] = &[
    &[&["on"], &["atop"]],
    &[&["under"], &["below"]],
    &[&["near"], &["beside"], &["next", "to"]],
    &[&["behind"]],
    &[&["with"]],
    &[&["above"]],
];

/// Caption openings placed before the first object.
pub const WRAPPERS: &[&[&str]] = &[&[], &["there", "is"], &["a", "photo", "of"], &["a", "picture", "of"], &[
    "an", "image", "of",
]];

pub const MAX_OBJECTS: usize = 3;

pub fn token(word: &str) -> TokenId {
    VOCAB.iter().position(|w| *w == word).unwrap_or_else(|| panic!("{word} not in vocabulary"))
}

pub fn word(id: TokenId) -> &'static str {
    VOCAB.get(id).copied().unwrap_or("<unk>")
}

/// Space-separated surface form.
pub fn render(tokens: &[TokenId]) -> String {
    tokens.iter().map(|&t| word(t)).collect::<Vec<_>>().join(" ")
}

/// One object of a scene.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneObject {
    pub entity: usize,
    pub attribute: usize,
    /// Relation linking the previous object to this one; `None` for the
    /// first object.
    pub relation: Option<usize>,
}

/// What an image depicts: a chain of 1 to 3 related objects.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneDescriptor {
    pub objects: Vec<SceneObject>,
}

impl SceneDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() || self.objects.len() > MAX_OBJECTS {
            return invalid(format!("scene has {} objects, expected 1..={MAX_OBJECTS}", self.objects.len()));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.entity >= ENTITIES.len() || o.attribute >= ATTRIBUTES.len() {
                return invalid(format!("object {i} ids out of range: {o:?}"));
            }
            match (i, o.relation) {
                (0, None) => {}
                (0, Some(_)) => return invalid("first object cannot carry a relation"),
                (_, Some(r)) if r < RELATIONS.len() => {}
                _ => return invalid(format!("object {i} needs a relation in 0..{}", RELATIONS.len())),
            }
        }
        Ok(())
    }
}

/// Every phrasing of `scene` with at most `max_len` tokens including the
/// final period, in a fixed order.
pub fn phrasings(scene: &SceneDescriptor, max_len: usize) -> Vec<Vec<TokenId>> {
    weighted_phrasings(scene, max_len, 0.0).into_iter().map(|(t, _)| t).collect()
}

/// Phrasings with relative frequencies: the `i`-th choice (0-based) of
/// every wrapper, relation phrase or synonym slot weighs `(i + 1)^-skew`,
/// and a phrasing weighs the product over its slots. `skew = 0` is uniform.
pub fn weighted_phrasings(scene: &SceneDescriptor, max_len: usize, skew: f64) -> Vec<(Vec<TokenId>, f64)> {
    let w = |i: usize| ((i + 1) as f64).powf(-skew);
    let words = |ws: &[&str]| ws.iter().map(|s| token(s)).collect::<Vec<_>>();
    let mut partial: Vec<(Vec<TokenId>, f64)> = WRAPPERS.iter().enumerate().map(|(i, ws)| (words(ws), w(i))).collect();
    for o in &scene.objects {
        let relations: Vec<(Vec<TokenId>, f64)> = match o.relation {
            Some(r) => RELATIONS[r].iter().enumerate().map(|(i, ph)| (words(ph), w(i))).collect(),
            None => vec![(Vec::new(), 1.0)],
        };
        let mut next = Vec::new();
        for (p, pw) in &partial {
            for (rel, rw) in &relations {
                for (ai, a) in ATTRIBUTES[o.attribute].iter().enumerate() {
                    for (ei, e) in ENTITIES[o.entity].iter().enumerate() {
                        let mut t = p.clone();
                        t.extend(rel);
                        t.extend([token("a"), token(a), token(e)]);
                        next.push((t, pw * rw * w(ai) * w(ei)));
                    }
                }
            }
        }
        partial = next;
    }
    partial
        .into_iter()
        .map(|(mut t, weight)| {
            t.push(PERIOD);
            (t, weight)
        })
        .filter(|(t, _)| t.len() <= max_len)
        .collect()
}

fn lookup(table: &[&[&str]], w: &str) -> Option<usize> {
    table.iter().position(|syn| syn.contains(&w))
}

/// Recovers the scene a caption describes; `None` when the caption is not a
/// grammatical phrasing.
pub fn parse(tokens: &[TokenId]) -> Option<SceneDescriptor> {
    let words: Vec<&str> = tokens.iter().map(|&t| word(t)).collect();
    let (&".", body) = words.split_last()? else { return None };
    let mut rest = body;
    for w in WRAPPERS.iter().filter(|w| !w.is_empty()) {
        // "a photo of" and "a <attr>" share the article, so match the
        // whole wrapper.
        if rest.len() > w.len() && rest[..w.len()] == **w {
            rest = &rest[w.len()..];
            break;
        }
    }
    let mut objects = Vec::new();
    loop {
        let relation = if objects.is_empty() {
            None
        } else {
            let (r, used) = RELATIONS.iter().enumerate().find_map(|(i, phrases)| {
                phrases
                    .iter()
                    .find(|ph| rest.len() >= ph.len() && rest[..ph.len()] == ***ph)
                    .map(|ph| (i, ph.len()))
            })?;
            rest = &rest[used..];
            Some(r)
        };
        let [art, a, e, tail @ ..] = rest else { return None };
        if *art != "a" {
            return None;
        }
        objects.push(SceneObject {
            entity: lookup(ENTITIES, e)?,
            attribute: lookup(ATTRIBUTES, a)?,
            relation,
        });
        rest = tail;
        if rest.is_empty() {
            break;
        }
    }
    let scene = SceneDescriptor { objects };
    scene.validate().ok().map(|_| scene)
}
