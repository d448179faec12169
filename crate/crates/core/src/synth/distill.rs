use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::model::{checkpoint_bytes, DecodingMode, ImageFeatures, Model, TokenId, PERIOD};

pub const PSEUDO_FORMAT: &str = "naic-pseudo-captions";
pub const PSEUDO_VERSION: u32 = 1;

/// Hex sha256 of the teacher's serialized checkpoint.
pub fn teacher_checksum(teacher: &Model) -> String {
    hex::encode(Sha256::digest(checkpoint_bytes(DecodingMode::Autoregressive, teacher)))
}

/// Teacher outputs for a set of images, tagged with the teacher's checksum.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoCaptions {
    pub teacher_sha256: String,
    pub beam_width: usize,
    pub max_len: usize,
    /// `(image id, caption)`; every caption ends with exactly one period.
    pub captions: Vec<(String, Vec<TokenId>)>,
}

/// Forces a beam output to end in a period within `max_len` tokens. An
/// unfinished hypothesis keeps its first `max_len - 1` tokens.
pub fn close_caption(mut tokens: Vec<TokenId>, max_len: usize) -> Vec<TokenId> {
    if let Some(p) = tokens.iter().position(|&t| t == PERIOD) {
        tokens.truncate(p + 1);
        return tokens;
    }
    tokens.truncate(max_len - 1);
    tokens.push(PERIOD);
    tokens
}

/// Beam-decodes every image with the teacher. Output order follows the
/// input order regardless of thread count.
pub fn distill(
    teacher: &Model,
    images: &[(String, &ImageFeatures)],
    beam_width: usize,
    max_len: usize,
) -> Result<PseudoCaptions> {
    if beam_width == 0 || max_len == 0 {
        return invalid("beam_width and max_len must be >= 1");
    }
    let captions = images
        .par_iter()
        .map(|(id, feat)| {
            let ctx = teacher.encode(feat)?;
            let hyp = teacher.decode_ar_beam(&ctx, beam_width, max_len)?;
            Ok((id.clone(), close_caption(hyp.tokens, max_len)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PseudoCaptions {
        teacher_sha256: teacher_checksum(teacher),
        beam_width,
        max_len,
        captions,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    teacher_sha256: String,
    beam_width: usize,
    max_len: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    id: String,
    tokens: Vec<TokenId>,
}

impl PseudoCaptions {
    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        let mut w = BufWriter::new(w);
        let header = Header {
            format: PSEUDO_FORMAT.into(),
            version: PSEUDO_VERSION,
            teacher_sha256: self.teacher_sha256.clone(),
            beam_width: self.beam_width,
            max_len: self.max_len,
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for (id, tokens) in &self.captions {
            serde_json::to_writer(
                &mut w,
                &Line {
                    id: id.clone(),
                    tokens: tokens.clone(),
                },
            )?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: std::io::Read>(r: R) -> Result<Self> {
        let bad = |detail: String| Error::Format {
            what: "pseudo-captions",
            detail,
        };
        let mut lines = BufReader::new(r).lines();
        let first = lines.next().ok_or_else(|| bad("empty file".into()))??;
        let h: Header = serde_json::from_str(&first).map_err(|e| bad(format!("header: {e}")))?;
        if h.format != PSEUDO_FORMAT || h.version != PSEUDO_VERSION {
            return Err(bad(format!("unsupported format {} v{}", h.format, h.version)));
        }
        let mut captions = Vec::new();
        for (n, line) in lines.enumerate() {
            let l: Line = serde_json::from_str(&line?).map_err(|e| bad(format!("line {n}: {e}")))?;
            if l.tokens.len() > h.max_len || l.tokens.last() != Some(&PERIOD) {
                return Err(bad(format!("line {n}: caption must end in a period within {} tokens", h.max_len)));
            }
            captions.push((l.id, l.tokens));
        }
        Ok(Self {
            teacher_sha256: h.teacher_sha256,
            beam_width: h.beam_width,
            max_len: h.max_len,
            captions,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        self.write(File::create(&tmp)?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(File::open(path)?)
    }
}
