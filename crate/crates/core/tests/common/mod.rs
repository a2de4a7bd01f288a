#![allow(dead_code)]

use std::time::Duration;

pub fn agent() -> ureq::Agent {
    ureq::Agent::config_builder()
        .http_status_as_error(false)
        .timeout_global(Some(Duration::from_secs(20)))
        .build()
        .into()
}

/// POSTs `body` and returns `(status, body)`; `Err` on transport failure.
pub fn post(url: &str, body: &[u8]) -> Result<(u16, String), ureq::Error> {
    let mut resp = agent().post(url).send(body)?;
    let status = resp.status().as_u16();
    let text = resp.body_mut().read_to_string()?;
    Ok((status, text))
}

pub fn get(url: &str) -> Result<(u16, String), ureq::Error> {
    let mut resp = agent().get(url).call()?;
    let status = resp.status().as_u16();
    let text = resp.body_mut().read_to_string()?;
    Ok((status, text))
}

pub fn json(text: &str) -> serde_json::Value {
    serde_json::from_str(text).unwrap_or_else(|e| panic!("not JSON ({e}): {text}"))
}
