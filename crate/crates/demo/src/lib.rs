//! wasm-bindgen surface over the demo session. All answers cross the
//! boundary as JSON strings; the page parses them.

mod session;

use wasm_bindgen::prelude::*;

pub use session::DemoSession;

fn to_js(e: kgner_core::error::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn ok_json(v: serde_json::Value) -> String {
    v.to_string()
}

#[wasm_bindgen]
pub struct Demo {
    session: DemoSession,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<Demo, JsValue> {
        Ok(Demo {
            session: DemoSession::new(seed as u64).map_err(to_js)?,
        })
    }

    pub fn corpus_info(&self) -> String {
        ok_json(self.session.corpus_info())
    }

    pub fn kge_epochs(&mut self, n: u32) -> Result<String, JsValue> {
        self.session
            .kge_epochs(n as usize)
            .map(ok_json)
            .map_err(to_js)
    }

    pub fn start_ner(&mut self) -> Result<(), JsValue> {
        self.session.start_ner().map_err(to_js)
    }

    pub fn ner_epochs(&mut self, n: u32) -> Result<String, JsValue> {
        self.session
            .ner_epochs(n as usize)
            .map(ok_json)
            .map_err(to_js)
    }

    pub fn finish_ner(&mut self) -> Result<String, JsValue> {
        self.session.finish_ner().map(ok_json).map_err(to_js)
    }

    pub fn is_trained(&self) -> bool {
        self.session.is_trained()
    }

    pub fn tag(&self, text: &str) -> Result<String, JsValue> {
        self.session.tag(text).map(ok_json).map_err(to_js)
    }

    pub fn shortlist(&self, word: &str, k1: u32, k2: u32) -> Result<String, JsValue> {
        self.session
            .shortlist(word, k1 as usize, k2 as usize)
            .map(ok_json)
            .map_err(to_js)
    }
}
