//! Flat dotted-key configuration: `key = value` lines in a file, plus
//! `--set key=value` command-line overrides applied afterwards, last one
//! wins. Unknown keys are rejected with the full valid-key list.

use std::path::Path;

use ivfuse_core::trainer::TrainConfig;

pub const VALID_KEYS: [&str; 24] = [
    "net.base_channels",
    "net.depths",
    "net.heads",
    "net.window",
    "net.text_dim",
    "net.with_text",
    "train.lr",
    "train.weight_decay",
    "train.beta1",
    "train.beta2",
    "train.clip_norm",
    "train.lr_final_frac",
    "train.batch_size",
    "train.steps",
    "train.patch",
    "train.ckpt_every",
    "loss.lambda_int",
    "loss.lambda_ssim",
    "loss.lambda_grad",
    "loss.lambda_color",
    "loss.delta_ir",
    "loss.alpha1",
    "loss.alpha2",
    "loss.alpha3",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse::<T>()
        .map_err(|e| format!("config key `{key}`: cannot parse `{value}`: {e}"))
}

fn parse_array4(key: &str, value: &str) -> Result<[usize; 4], String> {
    let parts: Vec<usize> = value
        .split(',')
        .map(|v| parse::<usize>(key, v))
        .collect::<Result<_, _>>()?;
    parts
        .try_into()
        .map_err(|_| format!("config key `{key}`: expected 4 comma-separated values"))
}

pub fn apply_key(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<(), String> {
    match key {
        "net.base_channels" => cfg.net.base_channels = parse(key, value)?,
        "net.depths" => cfg.net.depths = parse_array4(key, value)?,
        "net.heads" => cfg.net.heads = parse_array4(key, value)?,
        "net.window" => cfg.net.window = parse(key, value)?,
        "net.text_dim" => cfg.net.text_dim = parse(key, value)?,
        "net.with_text" => cfg.net.with_text = parse(key, value)?,
        "train.lr" => cfg.optim.lr = parse(key, value)?,
        "train.weight_decay" => cfg.optim.weight_decay = parse(key, value)?,
        "train.beta1" => cfg.optim.beta1 = parse(key, value)?,
        "train.beta2" => cfg.optim.beta2 = parse(key, value)?,
        "train.clip_norm" => cfg.optim.clip_norm = parse(key, value)?,
        "train.lr_final_frac" => cfg.optim.lr_final_frac = parse(key, value)?,
        "train.batch_size" => cfg.batch_size = parse(key, value)?,
        "train.steps" => cfg.steps = parse(key, value)?,
        "train.patch" => cfg.patch = parse(key, value)?,
        "train.ckpt_every" => cfg.ckpt_every = parse(key, value)?,
        "loss.lambda_int" => cfg.weights.lambda_int = parse(key, value)?,
        "loss.lambda_ssim" => cfg.weights.lambda_ssim = parse(key, value)?,
        "loss.lambda_grad" => cfg.weights.lambda_grad = parse(key, value)?,
        "loss.lambda_color" => cfg.weights.lambda_color = parse(key, value)?,
        "loss.delta_ir" => cfg.weights.delta_ir = parse(key, value)?,
        "loss.alpha1" => cfg.weights.alpha[0] = parse(key, value)?,
        "loss.alpha2" => cfg.weights.alpha[1] = parse(key, value)?,
        "loss.alpha3" => cfg.weights.alpha[2] = parse(key, value)?,
        _ => {
            return Err(format!(
                "unknown config key `{key}`; valid keys:\n  {}",
                VALID_KEYS.join("\n  ")
            ))
        }
    }
    Ok(())
}

pub fn load_config_file(cfg: &mut TrainConfig, path: &Path) -> Result<(), String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (key, value) = trimmed
            .split_once('=')
            .ok_or_else(|| format!("{}:{}: expected `key = value`", path.display(), i + 1))?;
        apply_key(cfg, key.trim(), value.trim())?;
    }
    Ok(())
}

pub fn apply_sets(cfg: &mut TrainConfig, sets: &[String]) -> Result<(), String> {
    for item in sets {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| format!("--set `{item}`: expected key=value"))?;
        apply_key(cfg, key.trim(), value.trim())?;
    }
    Ok(())
}
