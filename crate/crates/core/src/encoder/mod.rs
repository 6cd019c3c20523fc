//! Image encoder `E_I` and text anchors `E_T`.

mod text;
mod vit;

pub use text::{
    embed_text_toy, tokenize, AnchorPair, AnchorProvenance, TextAnchorSet, EMBEDDING_MAGIC, EMBEDDING_VERSION,
};
pub use vit::{
    deep_prompt_forward, embed_tokens, encode_image, encode_on_tape, forward_tokens, insert_shallow_prompts,
    is_encoder_group, patchify, positional_table, trainable_params, unpatchify, PromptMode, TuneMode, VitConfig,
    GROUP_DEEP, GROUP_EMBED, GROUP_HEAD, GROUP_SHALLOW,
};
