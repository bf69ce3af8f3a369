use std::time::Duration;

use serde_json::{json, Value};

use super::bank::find_placeholders;

pub const REFINE_PROMPT: &str = "Please combine the following sentences to one paragraph";
pub const ENV_URL: &str = "CADENZA_REFINE_URL";
pub const ENV_KEY: &str = "CADENZA_REFINE_KEY";
pub const ENV_MODEL: &str = "CADENZA_REFINE_MODEL";

/// Something that rewrites concatenated template text.
pub trait RefineClient {
    fn rewrite(&self, prompt: &str, text: &str) -> Result<String, String>;
}

/// Returns the text unchanged. The offline default.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityClient;

impl RefineClient for IdentityClient {
    fn rewrite(&self, _prompt: &str, text: &str) -> Result<String, String> {
        Ok(text.to_string())
    }
}

/// OpenAI-style chat-completion endpoint.
#[derive(Clone, Debug)]
pub struct ChatCompletionClient {
    pub url: String,
    pub api_key: Option<String>,
    pub model: String,
    pub timeout: Duration,
}

impl ChatCompletionClient {
    /// Reads the endpoint from the environment; `None` when unset.
    pub fn from_env() -> Option<Self> {
        let url = std::env::var(ENV_URL).ok().filter(|s| !s.is_empty())?;
        Some(Self {
            url,
            api_key: std::env::var(ENV_KEY).ok().filter(|s| !s.is_empty()),
            model: std::env::var(ENV_MODEL).unwrap_or_else(|_| "gpt-3.5-turbo".into()),
            timeout: Duration::from_secs(60),
        })
    }
}

impl RefineClient for ChatCompletionClient {
    fn rewrite(&self, prompt: &str, text: &str) -> Result<String, String> {
        let body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": format!("{prompt}\n\n{text}")}],
        });
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let mut req = agent
            .post(&self.url)
            .header("Content-Type", "application/json");
        if let Some(k) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {k}"));
        }
        let mut resp = req.send(body.to_string()).map_err(|e| e.to_string())?;
        let raw = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| e.to_string())?;
        let v: Value = serde_json::from_str(&raw).map_err(|e| e.to_string())?;
        v["choices"][0]["message"]["content"]
            .as_str()
            .map(|s| s.trim().to_string())
            .ok_or_else(|| "response has no choices[0].message.content".to_string())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RefineStats {
    pub accepted: usize,
    /// Outputs that lost or altered a placeholder.
    pub rejected: usize,
    /// Transport or protocol failures.
    pub failed: usize,
}

fn sorted_placeholders(text: &str) -> Vec<&str> {
    let mut v = find_placeholders(text);
    v.sort_unstable();
    v
}

/// Asks `client` to smooth `text`. The output is accepted only if it keeps
/// the same placeholders verbatim; otherwise the input is returned.
pub fn refine(text: &str, client: &dyn RefineClient, stats: &mut RefineStats) -> (String, bool) {
    match client.rewrite(REFINE_PROMPT, text) {
        Err(e) => {
            log::warn!("refinement failed: {e}");
            stats.failed += 1;
            (text.to_string(), false)
        }
        Ok(out) if sorted_placeholders(&out) == sorted_placeholders(text) => {
            stats.accepted += 1;
            (out, true)
        }
        Ok(_) => {
            stats.rejected += 1;
            (text.to_string(), false)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed(&'static str);

    impl RefineClient for Fixed {
        fn rewrite(&self, _: &str, _: &str) -> Result<String, String> {
            Ok(self.0.to_string())
        }
    }

    struct Down;

    impl RefineClient for Down {
        fn rewrite(&self, _: &str, _: &str) -> Result<String, String> {
            Err("connection refused".into())
        }
    }

    const INPUT: &str =
        "This music is composed in the [KEY] key. The song comprises [NUM_BARS] bars.";

    #[test]
    fn identity_is_accepted() {
        let mut s = RefineStats::default();
        assert_eq!(
            refine(INPUT, &IdentityClient, &mut s),
            (INPUT.to_string(), true)
        );
        assert_eq!(s.accepted, 1);
    }

    #[test]
    fn paraphrase_keeping_placeholders_is_accepted() {
        let mut s = RefineStats::default();
        let para = "Spanning [NUM_BARS] bars, the piece sits in a [KEY] key.";
        assert_eq!(
            refine(INPUT, &Fixed(para), &mut s),
            (para.to_string(), true)
        );
    }

    #[test]
    fn dropped_placeholder_falls_back() {
        let mut s = RefineStats::default();
        let out = refine(INPUT, &Fixed("The song comprises [NUM_BARS] bars."), &mut s);
        assert_eq!(out, (INPUT.to_string(), false));
        assert_eq!(s.rejected, 1);
        refine(INPUT, &Down, &mut s);
        assert_eq!(s.failed, 1);
    }
}
