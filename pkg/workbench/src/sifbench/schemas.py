NUMBER_OR_NULL = {"type": ["number", "null"]}
TOKEN_LIST = {"type": "array", "items": {"type": "integer", "minimum": 0}}
DIGEST = {"type": "string", "pattern": "^[0-9a-f]{64}$"}

KEY_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["scheme_id", "secret_hex"],
    "properties": {
        "scheme_id": {"type": "integer", "enum": [1]},
        "secret_hex": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
    },
}

DISTILL_CONFIG_SCHEMA = {
    "type": "object",
    "required": ["epsilon", "alpha", "steps", "top_k", "lambda_wm", "lambda_ce"],
    "properties": {
        "epsilon": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "alpha": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "steps": {"type": "integer", "minimum": 1},
        "top_k": {"type": "integer", "minimum": 1},
        "lambda_wm": {"type": "number", "minimum": 0},
        "lambda_ce": {"type": "number", "minimum": 0},
        "seed": {"type": "integer"},
        "record_every": {"type": "integer", "minimum": 1},
    },
}

TRIGGER_META_SCHEMA = {
    "type": "object",
    "required": [
        "trigger_id",
        "prompt",
        "teacher_response",
        "key_digest",
        "distill_config",
        "initial_losses",
        "final_losses",
        "history",
        "initial_z",
        "final_z",
        "threshold",
    ],
    "properties": {
        "trigger_id": {"type": "string"},
        "prompt": {**TOKEN_LIST, "minItems": 1},
        "teacher_response": {**TOKEN_LIST, "minItems": 80},
        "key_digest": DIGEST,
        "distill_config": DISTILL_CONFIG_SCHEMA,
        "initial_losses": {"type": "object", "additionalProperties": {"type": "number"}},
        "final_losses": {"type": "object", "additionalProperties": {"type": "number"}},
        "history": {"type": "array", "items": {"type": "object"}},
        "initial_z": NUMBER_OR_NULL,
        "final_z": NUMBER_OR_NULL,
        "threshold": NUMBER_OR_NULL,
        "rho": {"type": "number", "minimum": 0},
        "injected_norms": {"type": "array", "items": {"type": "number"}},
        "manifest_hash": {"type": "string"},
        "tool_version": {"type": "string"},
    },
}

THRESHOLD_TABLE_SCHEMA = {
    "type": "object",
    "required": ["entries", "key_digest", "models", "decode_config"],
    "properties": {
        "key_digest": DIGEST,
        "models": {"type": "array", "items": DIGEST},
        "decode_config": {"type": "object"},
        "entries": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["trigger_id", "tau", "calibration_z"],
                "properties": {
                    "trigger_id": {"type": "string"},
                    "tau": NUMBER_OR_NULL,
                    "calibration_z": {"type": "array", "items": NUMBER_OR_NULL},
                },
            },
        },
        "manifest_hash": {"type": "string"},
        "tool_version": {"type": "string"},
    },
}

FMR_REPORT_SCHEMA = {
    "type": "object",
    "required": ["entries", "fmr", "suspect_digest", "key_digest", "decode_config", "mutation"],
    "properties": {
        "fmr": {"type": "number", "minimum": 0, "maximum": 1},
        "suspect_digest": DIGEST,
        "key_digest": DIGEST,
        "decode_config": {"type": "object"},
        "mutation": {"type": "string"},
        "matched": {"type": "integer", "minimum": 0},
        "triggers": {"type": "integer", "minimum": 0},
        "entries": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["trigger_id", "z", "tau", "matched", "token_count"],
                "properties": {
                    "trigger_id": {"type": "string"},
                    "z": NUMBER_OR_NULL,
                    "tau": NUMBER_OR_NULL,
                    "matched": {"type": "boolean"},
                    "token_count": {"type": "integer", "minimum": 0},
                },
            },
        },
        "manifest_hash": {"type": "string"},
        "tool_version": {"type": "string"},
    },
}

MUTATION_SPEC_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind"],
    "properties": {
        "kind": {
            "type": "string",
            "enum": ["identity", "quantize", "finetune", "prune", "weight_noise", "image_noise", "resize"],
        },
        "params": {"type": "object"},
    },
}

MUTATION_LIST_SCHEMA = {"type": "array", "items": MUTATION_SPEC_SCHEMA}

QUERY_LINE_SCHEMA = {
    "type": "object",
    "required": ["image", "prompt"],
    "properties": {
        "image": {"type": "string", "minLength": 1},
        "prompt": {"type": "string", "minLength": 2},
        "id": {"type": "string"},
        "class": {"type": "string"},
    },
}

MANIFEST_SCHEMA = {
    "type": "object",
    "properties": {
        "seed": {"type": "integer"},
        "output_dir": {"type": "string"},
        "model": {"type": "object"},
        "unrelated": {"type": "object"},
        "heldout": {"type": "object"},
        "key": {"type": "object"},
        "watermark": {
            "type": "object",
            "properties": {
                "gamma": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "delta": {"type": "number", "minimum": 0},
            },
        },
        "decode": {"type": "object"},
        "distill": DISTILL_CONFIG_SCHEMA,
        "rfo": {"type": "object", "properties": {"rho": {"type": "number", "minimum": 0}}},
        "triggers": {
            "type": "object",
            "properties": {
                "count": {"type": "integer", "minimum": 1},
                "max_attempts": {"type": "integer", "minimum": 1},
                "min_teacher_gain": NUMBER_OR_NULL,
                "prompts": {"type": "array", "items": {"type": "string"}},
            },
        },
        "mutations": MUTATION_LIST_SCHEMA,
        "sda": {"type": "object"},
        "runtime": {"type": "object"},
    },
}
