//! Fine-grained class descriptions: the fixtures file format, an optional
//! remote LLM client and the cache-through fetch logic.
//!
//! Fixtures file: one record per class, records separated by blank lines.
//! The first line of a record is the class name, the remaining lines are the
//! description (joined with single spaces).

use std::path::{Path, PathBuf};
use std::time::Duration;

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DescriptionSource {
    FixtureFile,
    RemoteLlm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassDescription {
    pub class_name: String,
    pub description: String,
    pub source: DescriptionSource,
}

/// Parses fixtures text. Errors carry the 1-based line number.
pub fn parse_fixtures(path: &Path, text: &str) -> Result<Vec<(String, String)>> {
    let err = |line: usize, msg: &str| Error::Format {
        path: path.to_path_buf(),
        line,
        msg: msg.to_string(),
    };
    let mut records: Vec<(String, String)> = Vec::new();
    let mut current: Option<(String, Vec<String>, usize)> = None;
    let finish = |cur: Option<(String, Vec<String>, usize)>,
                      records: &mut Vec<(String, String)>|
     -> Result<()> {
        if let Some((name, lines, at)) = cur {
            if lines.is_empty() {
                return Err(err(at, &format!("class {name:?} has no description lines")));
            }
            if records.iter().any(|(n, _)| *n == name) {
                return Err(err(at, &format!("duplicate class {name:?}")));
            }
            records.push((name, lines.join(" ")));
        }
        Ok(())
    };
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            finish(current.take(), &mut records)?;
            continue;
        }
        match &mut current {
            None => {
                if line.contains('\t') {
                    return Err(err(i + 1, "class name must not contain tabs"));
                }
                current = Some((line.to_string(), Vec::new(), i + 1));
            }
            Some((_, lines, _)) => lines.push(line.to_string()),
        }
    }
    finish(current.take(), &mut records)?;
    Ok(records)
}

pub fn render_fixtures(records: &[(String, String)]) -> String {
    let mut out = String::new();
    for (i, (name, desc)) in records.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(name);
        out.push('\n');
        out.push_str(desc);
        out.push('\n');
    }
    out
}

/// Question sent to the language model for one class.
pub fn llm_query(class_name: &str) -> String {
    format!("What are the most useful visual features to distinguish the facial expression of {class_name}?")
}

/// Anything that turns a prompt into generated text.
pub trait TextGenerator {
    fn generate(&self, prompt: &str) -> Result<String>;
}

/// Remote endpoint settings. The API key is read from `api_key_env` at
/// request time; it is never stored.
#[derive(Clone, Debug, PartialEq)]
pub struct RemoteConfig {
    pub base_url: String,
    pub api_key_env: String,
    pub model: String,
    pub timeout: Duration,
    /// Top-level JSON field holding the generated text.
    pub response_field: String,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8080/generate".into(),
            api_key_env: "MPAF_LLM_API_KEY".into(),
            model: "gpt-3.5-turbo".into(),
            timeout: Duration::from_secs(30),
            response_field: "text".into(),
        }
    }
}

/// Blocking HTTP client: `POST {model, prompt}` as JSON, reads
/// `response_field` from the JSON reply.
pub struct HttpGenerator {
    config: RemoteConfig,
    agent: ureq::Agent,
}

impl HttpGenerator {
    pub fn new(config: RemoteConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .build()
            .into();
        Self { config, agent }
    }
}

impl TextGenerator for HttpGenerator {
    fn generate(&self, prompt: &str) -> Result<String> {
        let body = serde_json::json!({ "model": self.config.model, "prompt": prompt });
        let mut req = self.agent.post(&self.config.base_url);
        if let Ok(key) = std::env::var(&self.config.api_key_env) {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(&body)
            .map_err(|e| Error::Remote(e.to_string()))?;
        let value: serde_json::Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| Error::Remote(e.to_string()))?;
        value
            .get(&self.config.response_field)
            .and_then(|v| v.as_str())
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .ok_or_else(|| {
                Error::Remote(format!(
                    "response has no non-empty string field {:?}",
                    self.config.response_field
                ))
            })
    }
}

/// Where descriptions come from: a fixtures file, optionally backed by a
/// remote generator whose answers are cached into that file.
pub struct DescriptionProvider<'a> {
    pub fixtures: PathBuf,
    pub remote: Option<&'a dyn TextGenerator>,
}

impl<'a> DescriptionProvider<'a> {
    pub fn fixtures(path: impl Into<PathBuf>) -> Self {
        Self {
            fixtures: path.into(),
            remote: None,
        }
    }

    pub fn with_remote(mut self, remote: &'a dyn TextGenerator) -> Self {
        self.remote = Some(remote);
        self
    }
}

/// Loads the class names from a fixtures file, in file order.
pub fn fixture_classes(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_fixtures(path, &text)?.into_iter().map(|(n, _)| n).collect())
}

/// One description per class in `classes` order. Classes missing from the
/// fixtures are generated remotely (when configured) and appended to the
/// fixtures file, so a repeated call is served offline.
pub fn fetch_descriptions(
    provider: &DescriptionProvider,
    classes: &[String],
) -> Result<Vec<ClassDescription>> {
    let path = &provider.fixtures;
    let mut records = if path.exists() {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        parse_fixtures(path, &text)?
    } else {
        Vec::new()
    };
    let mut out = Vec::with_capacity(classes.len());
    let mut fetched = false;
    for class in classes {
        if let Some((_, desc)) = records.iter().find(|(n, _)| n == class) {
            out.push(ClassDescription {
                class_name: class.clone(),
                description: desc.clone(),
                source: DescriptionSource::FixtureFile,
            });
            continue;
        }
        let remote = provider
            .remote
            .ok_or_else(|| Error::MissingClass(class.clone()))?;
        let text = remote
            .generate(&llm_query(class))
            .map_err(|_| Error::MissingClass(class.clone()))?;
        let description = text.split_whitespace().collect::<Vec<_>>().join(" ");
        records.push((class.clone(), description.clone()));
        fetched = true;
        out.push(ClassDescription {
            class_name: class.clone(),
            description,
            source: DescriptionSource::RemoteLlm,
        });
    }
    if fetched {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, render_fixtures(&records)).map_err(|e| Error::io(path, e))?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    struct Counting {
        calls: Cell<usize>,
        fail: bool,
    }

    impl TextGenerator for Counting {
        fn generate(&self, prompt: &str) -> Result<String> {
            self.calls.set(self.calls.get() + 1);
            if self.fail {
                return Err(Error::Remote("offline".into()));
            }
            Ok(format!("generated for: {prompt}\n  with wrapped lines"))
        }
    }

    fn classes(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn parse_and_render_round_trip() {
        let text = "anger\nfurrowed brows\nclenched jaw\n\njoy\nraised cheeks\n";
        let recs = parse_fixtures(Path::new("f"), text).unwrap();
        assert_eq!(recs[0], ("anger".into(), "furrowed brows clenched jaw".into()));
        assert_eq!(parse_fixtures(Path::new("f"), &render_fixtures(&recs)).unwrap(), recs);
    }

    #[test]
    fn malformed_fixtures_report_line() {
        let err = parse_fixtures(Path::new("f"), "anger\ndesc\n\n\nfear\n").unwrap_err();
        match err {
            Error::Format { line, .. } => assert_eq!(line, 5),
            other => panic!("{other:?}"),
        }
        let err = parse_fixtures(Path::new("f"), "a\nx\n\na\ny\n").unwrap_err();
        assert!(matches!(err, Error::Format { line: 4, .. }));
    }

    #[test]
    fn missing_class_without_remote_names_it() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fx.txt");
        std::fs::write(&path, "anger\nbrows\n").unwrap();
        let err = fetch_descriptions(&DescriptionProvider::fixtures(&path), &classes(&["anger", "disgust"]))
            .unwrap_err();
        assert!(err.to_string().contains("disgust"));
    }

    #[test]
    fn remote_results_are_cached() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fx.txt");
        std::fs::write(&path, "anger\nbrows\n").unwrap();
        let gen = Counting { calls: Cell::new(0), fail: false };
        let provider = DescriptionProvider::fixtures(&path).with_remote(&gen);
        let cls = classes(&["anger", "fear"]);
        let first = fetch_descriptions(&provider, &cls).unwrap();
        assert_eq!(gen.calls.get(), 1);
        assert_eq!(first[1].source, DescriptionSource::RemoteLlm);
        assert!(first[1].description.contains("fear"));
        let second = fetch_descriptions(&provider, &cls).unwrap();
        assert_eq!(gen.calls.get(), 1);
        assert!(second.iter().all(|d| d.source == DescriptionSource::FixtureFile));
        assert_eq!(second[1].description, first[1].description);
    }

    #[test]
    fn remote_failure_falls_back_to_fixtures() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fx.txt");
        std::fs::write(&path, "anger\nbrows\n").unwrap();
        let gen = Counting { calls: Cell::new(0), fail: true };
        let provider = DescriptionProvider::fixtures(&path).with_remote(&gen);
        assert_eq!(fetch_descriptions(&provider, &classes(&["anger"])).unwrap().len(), 1);
        let err = fetch_descriptions(&provider, &classes(&["fear"])).unwrap_err();
        assert!(matches!(err, Error::MissingClass(ref c) if c == "fear"));
    }
}
