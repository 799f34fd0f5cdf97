//! OpenAI chat-completions wire format.

use serde::{Deserialize, Serialize};

use super::{BackendError, ChatRequest, MessageRole};

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'static str,
    content: &'a str,
}

/// Serializes a request body. Field order is fixed: model, messages,
/// temperature, max_tokens. An empty system instruction is omitted.
pub fn request_body(request: &ChatRequest, default_model: &str) -> Vec<u8> {
    let mut messages = Vec::with_capacity(request.messages.len() + 1);
    if !request.system_instruction.is_empty() {
        messages.push(WireMessage {
            role: "system",
            content: &request.system_instruction,
        });
    }
    messages.extend(request.messages.iter().map(|m| WireMessage {
        role: match m.role {
            MessageRole::Agent => "assistant",
            MessageRole::Counterpart => "user",
        },
        content: &m.text,
    }));
    let body = WireRequest {
        model: request.model_name.as_deref().unwrap_or(default_model),
        messages,
        temperature: request.temperature,
        max_tokens: request.max_output,
    };
    serde_json::to_vec(&body).expect("request body serializes")
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Option<Vec<WireChoice>>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: Option<WireReply>,
}

#[derive(Deserialize)]
struct WireReply {
    content: Option<String>,
}

/// Extracts the first choice's message text.
pub fn parse_reply(body: &str) -> Result<String, BackendError> {
    let malformed = |reason: &str| BackendError::Malformed {
        reason: reason.into(),
        raw: body.to_string(),
    };
    let parsed: WireResponse =
        serde_json::from_str(body).map_err(|e| malformed(&format!("invalid JSON: {e}")))?;
    let choices = parsed.choices.ok_or_else(|| malformed("missing `choices`"))?;
    let first = choices
        .into_iter()
        .next()
        .ok_or_else(|| malformed("empty `choices`"))?;
    first
        .message
        .and_then(|m| m.content)
        .ok_or_else(|| malformed("missing `choices[0].message.content`"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::Message;

    #[test]
    fn roles_map_to_user_and_assistant() {
        let req = ChatRequest::new(
            "sys",
            vec![Message::counterpart("hi"), Message::agent("hello")],
        )
        .temperature(0.0)
        .max_output(16);
        let body = String::from_utf8(request_body(&req, "m")).unwrap();
        assert_eq!(
            body,
            r#"{"model":"m","messages":[{"role":"system","content":"sys"},{"role":"user","content":"hi"},{"role":"assistant","content":"hello"}],"temperature":0.0,"max_tokens":16}"#
        );
    }

    #[test]
    fn reply_parsing() {
        assert_eq!(
            parse_reply(r#"{"choices":[{"message":{"role":"assistant","content":"4"}}]}"#).unwrap(),
            "4"
        );
        for bad in [r#"{"id":"x"}"#, r#"{"choices":[]}"#, "not json", r#"{"choices":[{"message":{"content":null}}]}"#] {
            match parse_reply(bad) {
                Err(BackendError::Malformed { raw, .. }) => assert_eq!(raw, bad),
                other => panic!("{other:?}"),
            }
        }
    }
}
