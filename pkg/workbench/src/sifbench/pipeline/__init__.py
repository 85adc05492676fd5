"""Pipeline stages: corpus, distillation, mutations, attack, verification."""
