#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace wqe {

enum class Architecture { decoder_only, encoder_decoder };

const char* architecture_name(Architecture a) noexcept;
Architecture parse_architecture(std::string_view name);

struct ModelMeta {
  int num_layers = 0;
  int num_heads = 0;
  int vocab_size = 0;
  Architecture architecture = Architecture::decoder_only;

  friend bool operator==(const ModelMeta&, const ModelMeta&) = default;
};

struct DeskModelConfig {
  int vocab_size = 32;
  int model_dim = 16;
  int num_layers = 3;
  int num_heads = 2;
  Architecture architecture = Architecture::decoder_only;
  double dropout_p = 0.1;
  std::uint64_t seed = 0;

  // Throws InvalidConfig when a limit is exceeded or dims are inconsistent.
  void validate() const;

  friend bool operator==(const DeskModelConfig&, const DeskModelConfig&) = default;
};

}  // namespace wqe
