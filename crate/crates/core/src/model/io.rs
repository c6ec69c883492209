//! Line-delimited JSON rollout format.
//!
//! ```text
//! {"type":"header","episode_id":str,"h":int,"k":int,"d":int,"H":int,"dt":float}
//! {"type":"step","t":int,"batch":[[[float;d];h];B],"executed":[[float;d];k],"embedding":[float;E]?}
//! ...
//! {"type":"result","return":float,"success":bool}
//! ```
//!
//! Floats are written with the shortest decimal that round-trips to the same
//! IEEE-754 double, so `load_rollout(save_rollout(r)) == r` bit for bit.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{ActionChunk, ChunkBatch, Matrix, Rollout, RolloutHeader, RolloutStep};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum Record {
    Header(RolloutHeader),
    Step {
        t: usize,
        batch: Vec<Vec<Vec<f64>>>,
        executed: Vec<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        embedding: Option<Vec<f64>>,
    },
    Result {
        #[serde(rename = "return")]
        terminal_return: f64,
        success: bool,
    },
}

fn at_line(line: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Format { .. } => e,
        other => Error::Format {
            line,
            message: other.to_string(),
        },
    }
}

fn step_from_record(
    header: &RolloutHeader,
    t: usize,
    batch: Vec<Vec<Vec<f64>>>,
    executed: Vec<Vec<f64>>,
    embedding: Option<Vec<f64>>,
) -> Result<RolloutStep> {
    let mut chunks = Vec::with_capacity(batch.len());
    for rows in &batch {
        let m = Matrix::from_rows(rows)?;
        if m.rows != header.h || m.cols != header.d {
            return Err(Error::shape(format!(
                "chunk shape mismatch at t={t}: {}x{}, header says {}x{}",
                m.rows, m.cols, header.h, header.d
            )));
        }
        chunks.push(ActionChunk(m));
    }
    if chunks.is_empty() {
        return Err(Error::shape(format!("empty batch at t={t}")));
    }
    let executed = Matrix::from_rows(&executed)?;
    Ok(RolloutStep {
        batch: ChunkBatch { t, chunks },
        executed,
        embedding,
    })
}

/// Reads one rollout from a JSONL stream and validates every invariant.
pub fn load_rollout<R: BufRead>(reader: R) -> Result<Rollout> {
    let mut header: Option<RolloutHeader> = None;
    let mut steps: Vec<RolloutStep> = Vec::new();
    let mut result: Option<(f64, bool)> = None;
    let mut embedding_dim = None;
    let mut last_line = 0;

    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        last_line = lineno;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| Error::Format {
            line: lineno,
            message: format!("malformed record: {e}"),
        })?;
        if result.is_some() {
            return Err(Error::Format {
                line: lineno,
                message: "record after result".into(),
            });
        }
        match record {
            Record::Header(h) => {
                if header.is_some() || !steps.is_empty() {
                    return Err(Error::Format {
                        line: lineno,
                        message: "header must be the first record and appear once".into(),
                    });
                }
                h.validate().map_err(at_line(lineno))?;
                header = Some(h);
            }
            Record::Step {
                t,
                batch,
                executed,
                embedding,
            } => {
                let Some(h) = header.as_ref() else {
                    return Err(Error::Format {
                        line: lineno,
                        message: "header missing or not first".into(),
                    });
                };
                let step = step_from_record(h, t, batch, executed, embedding)
                    .map_err(at_line(lineno))?;
                // Rollout::validate_step only needs the header.
                let probe = Rollout {
                    header: h.clone(),
                    steps: Vec::new(),
                    terminal_return: 0.0,
                    success: false,
                };
                probe
                    .validate_step(steps.len(), &step, &mut embedding_dim)
                    .map_err(at_line(lineno))?;
                steps.push(step);
            }
            Record::Result {
                terminal_return,
                success,
            } => {
                if header.is_none() {
                    return Err(Error::Format {
                        line: lineno,
                        message: "header missing or not first".into(),
                    });
                }
                result = Some((terminal_return, success));
            }
        }
    }

    let header = header.ok_or(Error::Format {
        line: last_line.max(1),
        message: "header missing".into(),
    })?;
    let (terminal_return, success) = result.ok_or(Error::Format {
        line: last_line.max(1),
        message: "missing result record".into(),
    })?;
    let rollout = Rollout {
        header,
        steps,
        terminal_return,
        success,
    };
    rollout.validate().map_err(at_line(last_line))?;
    Ok(rollout)
}

/// Writes a validated rollout as JSONL. Non-finite values are rejected.
pub fn save_rollout<W: Write>(rollout: &Rollout, mut writer: W) -> Result<()> {
    rollout.validate()?;
    serde_json::to_writer(&mut writer, &Record::Header(rollout.header.clone()))?;
    writer.write_all(b"\n")?;
    for step in &rollout.steps {
        let record = Record::Step {
            t: step.batch.t,
            batch: step.batch.chunks.iter().map(|c| c.0.to_rows()).collect(),
            executed: step.executed.to_rows(),
            embedding: step.embedding.clone(),
        };
        serde_json::to_writer(&mut writer, &record)?;
        writer.write_all(b"\n")?;
    }
    serde_json::to_writer(
        &mut writer,
        &Record::Result {
            terminal_return: rollout.terminal_return,
            success: rollout.success,
        },
    )?;
    writer.write_all(b"\n")?;
    writer.flush()?;
    Ok(())
}

/// Serializes a rollout to an in-memory JSONL string.
pub fn rollout_to_string(rollout: &Rollout) -> Result<String> {
    let mut buf = Vec::new();
    save_rollout(rollout, &mut buf)?;
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header_line(h: usize, k: usize, d: usize, horizon: usize) -> String {
        format!(
            r#"{{"type":"header","episode_id":"ep","h":{h},"k":{k},"d":{d},"H":{horizon},"dt":0.1}}"#
        )
    }

    fn step_line(t: usize, h: usize, k: usize, d: usize, b: usize) -> String {
        let row = vec![0.5; d];
        let chunk = vec![row.clone(); h];
        let batch = vec![chunk; b];
        let executed = vec![row; k];
        serde_json::json!({"type":"step","t":t,"batch":batch,"executed":executed}).to_string()
    }

    const RESULT: &str = r#"{"type":"result","return":1.0,"success":true}"#;

    #[test]
    fn loads_three_step_rollout() {
        let text = [
            header_line(16, 8, 2, 48),
            step_line(0, 16, 8, 2, 3),
            step_line(8, 16, 8, 2, 3),
            step_line(16, 16, 8, 2, 3),
            RESULT.to_string(),
        ]
        .join("\n");
        let r = load_rollout(text.as_bytes()).unwrap();
        assert_eq!(r.steps.len(), 3);
        assert_eq!(r.length(), 24);
        assert!(r.success);
    }

    #[test]
    fn rejects_timestep_gap() {
        let text = [
            header_line(16, 8, 2, 48),
            step_line(0, 16, 8, 2, 2),
            step_line(16, 16, 8, 2, 2),
            RESULT.to_string(),
        ]
        .join("\n");
        let err = load_rollout(text.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("step timestep gap at t=16"), "{err}");
        assert!(err.starts_with("line 3"), "{err}");
    }

    #[test]
    fn rejects_short_chunk() {
        let text = [
            header_line(16, 8, 2, 48),
            step_line(0, 15, 8, 2, 2),
            RESULT.to_string(),
        ]
        .join("\n");
        let err = load_rollout(text.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("chunk shape mismatch"), "{err}");
    }

    #[test]
    fn rejects_missing_header() {
        let text = [step_line(0, 4, 2, 1, 2), RESULT.to_string()].join("\n");
        let err = load_rollout(text.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("header missing"), "{err}");
    }

    #[test]
    fn rejects_missing_result() {
        let text = [header_line(4, 2, 1, 8), step_line(0, 4, 2, 1, 2)].join("\n");
        let err = load_rollout(text.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("missing result"), "{err}");
    }

    #[test]
    fn reports_malformed_line_number() {
        let text = [header_line(4, 2, 1, 8), "{not json".to_string()].join("\n");
        match load_rollout(text.as_bytes()) {
            Err(Error::Format { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn omits_absent_embedding_and_rejects_infinity() {
        let text = [
            header_line(4, 2, 1, 8),
            step_line(0, 4, 2, 1, 2),
            RESULT.to_string(),
        ]
        .join("\n");
        let mut r = load_rollout(text.as_bytes()).unwrap();
        let out = rollout_to_string(&r).unwrap();
        assert!(!out.contains("embedding"));
        r.steps[0].batch.chunks[0].0.data[0] = f64::INFINITY;
        assert!(rollout_to_string(&r).is_err());
    }
}
