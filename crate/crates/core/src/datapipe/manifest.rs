use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::{from_json_lines, to_json_lines, write_atomic};

/// One utterance as listed in a manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceMeta {
    pub utterance_id: String,
    pub speaker_id: String,
    pub duration_s: f64,
    /// Creation time, seconds since the Unix epoch.
    pub timestamp: u64,
    /// Where the payload comes from: a path or a `synth:` generator seed.
    pub locator: String,
}

impl UtteranceMeta {
    pub fn validate(&self) -> Result<()> {
        if self.utterance_id.is_empty() || self.speaker_id.is_empty() {
            return Err(Error::InvalidInput(format!("utterance {:?} has an empty id", self.utterance_id)));
        }
        if !(self.duration_s > 0.0) || !self.duration_s.is_finite() {
            return Err(Error::InvalidInput(format!(
                "utterance {} has non-positive duration {}",
                self.utterance_id, self.duration_s
            )));
        }
        Ok(())
    }
}

pub fn total_hours(metas: &[UtteranceMeta]) -> f64 {
    metas.iter().map(|m| m.duration_s).sum::<f64>() / 3600.0
}

pub fn write_manifest(path: &Path, metas: &[UtteranceMeta]) -> Result<()> {
    write_atomic(path, &to_json_lines(metas)?)
}

pub fn read_manifest(path: &Path) -> Result<Vec<UtteranceMeta>> {
    let metas: Vec<UtteranceMeta> = from_json_lines(path)?;
    for m in &metas {
        m.validate().map_err(|e| Error::Parse {
            what: path.display().to_string(),
            reason: e.to_string(),
        })?;
    }
    Ok(metas)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let metas = vec![UtteranceMeta {
            utterance_id: "u1".into(),
            speaker_id: "s1".into(),
            duration_s: 2.5,
            timestamp: 10,
            locator: "synth:1:2".into(),
        }];
        write_manifest(&path, &metas).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "{\"utterance_id\":\"u1\",\"speaker_id\":\"s1\",\"duration_s\":2.5,\"timestamp\":10,\"locator\":\"synth:1:2\"}\n"
        );
        assert_eq!(read_manifest(&path).unwrap(), metas);

        std::fs::write(&path, "{\"utterance_id\":\"u\",\"speaker_id\":\"s\",\"duration_s\":0,\"timestamp\":1,\"locator\":\"x\"}\n").unwrap();
        assert!(read_manifest(&path).is_err());
    }
}
