//! Natural-language-inference judges. The gold answer is the premise, the
//! prediction the hypothesis.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::metrics::{EvalTokenizer, SimpleTokenizer};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NliLabel {
    Entailment,
    Neutral,
    Contradiction,
}

pub trait NliJudge: Sync {
    fn name(&self) -> &str;
    fn judge(&self, premise: &str, hypothesis: &str) -> std::result::Result<NliLabel, String>;
}

/// Deterministic lexical judge: identical token sequences entail, disjoint
/// vocabularies contradict, anything else is neutral.
#[derive(Clone, Copy, Debug, Default)]
pub struct StubJudge;

impl NliJudge for StubJudge {
    fn name(&self) -> &str {
        "stub"
    }

    fn judge(&self, premise: &str, hypothesis: &str) -> std::result::Result<NliLabel, String> {
        let p = SimpleTokenizer.tokenize(premise);
        let h = SimpleTokenizer.tokenize(hypothesis);
        if p == h {
            return Ok(NliLabel::Entailment);
        }
        let ps: HashSet<&String> = p.iter().collect();
        if h.iter().all(|t| !ps.contains(t)) {
            Ok(NliLabel::Contradiction)
        } else {
            Ok(NliLabel::Neutral)
        }
    }
}

#[derive(Serialize)]
struct JudgeRequest<'a> {
    premise: &'a str,
    hypothesis: &'a str,
}

#[derive(Deserialize)]
struct JudgeResponse {
    label: NliLabel,
}

struct Pipe {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

/// Talks to an external classifier over JSON lines: one
/// `{"premise": .., "hypothesis": ..}` per request line, one
/// `{"label": "entailment" | "neutral" | "contradiction"}` per reply line.
pub struct SubprocessJudge {
    name: String,
    pipe: Mutex<Pipe>,
}

impl SubprocessJudge {
    pub fn spawn(name: impl Into<String>, program: &str, args: &[String]) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Self {
            name: name.into(),
            pipe: Mutex::new(Pipe {
                child,
                stdin,
                stdout,
            }),
        })
    }
}

impl NliJudge for SubprocessJudge {
    fn name(&self) -> &str {
        &self.name
    }

    fn judge(&self, premise: &str, hypothesis: &str) -> std::result::Result<NliLabel, String> {
        let mut pipe = self.pipe.lock().map_err(|_| "judge pipe poisoned".to_string())?;
        let line = serde_json::to_string(&JudgeRequest { premise, hypothesis }).map_err(|e| e.to_string())?;
        writeln!(pipe.stdin, "{line}").map_err(|e| e.to_string())?;
        pipe.stdin.flush().map_err(|e| e.to_string())?;
        let mut reply = String::new();
        let read = pipe.stdout.read_line(&mut reply).map_err(|e| e.to_string())?;
        if read == 0 {
            return Err("judge process closed its output".into());
        }
        serde_json::from_str::<JudgeResponse>(&reply)
            .map(|r| r.label)
            .map_err(|e| format!("bad reply {reply:?}: {e}"))
    }
}

impl Drop for SubprocessJudge {
    fn drop(&mut self) {
        if let Ok(pipe) = self.pipe.get_mut() {
            let _ = pipe.child.kill();
            let _ = pipe.child.wait();
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NliRatios {
    pub entailment_ratio: f64,
    pub neutral_ratio: f64,
    pub contradiction_ratio: f64,
}

/// One predicted/gold pair with the sample it came from.
#[derive(Clone, Copy, Debug)]
pub struct NliPair<'a> {
    pub sample_id: &'a str,
    pub prediction: &'a str,
    pub gold: &'a str,
}

pub fn nli_ratios(pairs: &[NliPair], judges: &[&dyn NliJudge]) -> Result<BTreeMap<String, NliRatios>> {
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut out = BTreeMap::new();
    for judge in judges {
        let mut counts = [0usize; 3];
        for pair in pairs {
            let label = judge.judge(pair.gold, pair.prediction).map_err(|message| Error::JudgeFailure {
                judge: judge.name().to_string(),
                sample_id: pair.sample_id.to_string(),
                message,
            })?;
            counts[label as usize] += 1;
        }
        let n = pairs.len() as f64;
        out.insert(
            judge.name().to_string(),
            NliRatios {
                entailment_ratio: counts[0] as f64 / n,
                neutral_ratio: counts[1] as f64 / n,
                contradiction_ratio: counts[2] as f64 / n,
            },
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Failing;

    impl NliJudge for Failing {
        fn name(&self) -> &str {
            "failing"
        }
        fn judge(&self, _: &str, _: &str) -> std::result::Result<NliLabel, String> {
            Err("offline".into())
        }
    }

    #[test]
    fn stub_labels() {
        assert_eq!(StubJudge.judge("Yes.", "yes").unwrap(), NliLabel::Entailment);
        assert_eq!(StubJudge.judge("No anomaly.", "A tumor").unwrap(), NliLabel::Contradiction);
        assert_eq!(StubJudge.judge("A tumor.", "A cyst").unwrap(), NliLabel::Neutral);
    }

    #[test]
    fn failure_names_the_sample() {
        let pairs = [NliPair {
            sample_id: "s7",
            prediction: "a",
            gold: "b",
        }];
        let err = nli_ratios(&pairs, &[&Failing]).unwrap_err();
        assert!(matches!(err, Error::JudgeFailure { ref sample_id, .. } if sample_id == "s7"));
    }

    #[test]
    fn subprocess_protocol() {
        // echo-style judge written in shell: answers neutral to every line
        let script = "while read -r line; do echo '{\"label\":\"neutral\"}'; done".to_string();
        let judge = SubprocessJudge::spawn("sh", "sh", &["-c".into(), script]).unwrap();
        assert_eq!(judge.judge("a", "b").unwrap(), NliLabel::Neutral);
        assert_eq!(judge.judge("c", "d").unwrap(), NliLabel::Neutral);
    }
}
