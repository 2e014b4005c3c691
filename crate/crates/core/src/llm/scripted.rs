use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use super::{Backend, Completion, PromptRequest, Stage};
use crate::error::{Error, Result};

type Key = (Option<String>, Stage);

/// Replays canned responses keyed by `(scope, stage, n)`, where `n` counts the
/// calls made so far for that scope and stage (starting at 1).
///
/// On disk a fixture lives at `<root>/<scope>/<stage>-<n>.txt`; requests
/// without a scope read from `<root>` directly.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    root: Option<PathBuf>,
    entries: HashMap<(Option<String>, Stage, u32), String>,
    counters: Mutex<HashMap<Key, u32>>,
    served: Mutex<usize>,
}

impl ScriptedBackend {
    pub fn from_dir(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        if !root.is_dir() {
            return Err(Error::Config(format!(
                "fixture directory {} does not exist",
                root.display()
            )));
        }
        Ok(ScriptedBackend {
            root: Some(root),
            ..Default::default()
        })
    }

    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        scope: Option<String>,
        stage: Stage,
        seq: u32,
        text: impl Into<String>,
    ) -> &mut Self {
        self.entries.insert((scope, stage, seq), text.into());
        self
    }

    /// Number of responses handed out so far.
    pub fn served(&self) -> usize {
        *self.served.lock().unwrap()
    }

    pub fn fixture_path(root: &Path, scope: Option<&str>, stage: Stage, seq: u32) -> PathBuf {
        let mut p = root.to_path_buf();
        if let Some(s) = scope {
            p.push(s);
        }
        p.push(format!("{stage}-{seq}.txt"));
        p
    }

    fn lookup(&self, scope: Option<&str>, stage: Stage, seq: u32) -> Result<String> {
        let key = (scope.map(str::to_string), stage, seq);
        if let Some(text) = self.entries.get(&key) {
            return Ok(text.clone());
        }
        let name = match scope {
            Some(s) => format!("{s}/{stage}-{seq}"),
            None => format!("{stage}-{seq}"),
        };
        let Some(root) = &self.root else {
            return Err(Error::Config(format!("no scripted fixture for {name}")));
        };
        let path = Self::fixture_path(root, scope, stage, seq);
        fs::read_to_string(&path).map_err(|_| {
            Error::Config(format!(
                "no scripted fixture for {name} (expected {})",
                path.display()
            ))
        })
    }
}

impl Backend for ScriptedBackend {
    fn complete(&self, request: &PromptRequest) -> Result<Completion> {
        let seq = {
            let mut counters = self.counters.lock().unwrap();
            let n = counters
                .entry((request.scope.clone(), request.stage))
                .or_insert(0);
            *n += 1;
            *n
        };
        let text = self.lookup(request.scope.as_deref(), request.stage, seq)?;
        *self.served.lock().unwrap() += 1;
        Ok(Completion {
            text,
            latency_ms: 0,
        })
    }
}
