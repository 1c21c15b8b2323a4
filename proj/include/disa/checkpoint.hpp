#pragma once

// Versioned little-endian parameter files. A file is the magic "DISA", a
// u32 format version, then named blocks until end of file:
//   u32 name length, name bytes, u32 rank, u64 dims[rank], f64 values.
// Backbone tensors live under "backbone/", prompts under "prompts/", and
// class prototypes under "prototypes" with "prototypes.class_ids" and
// "prototypes.counts" index blocks.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "disa/encoders.hpp"
#include "disa/regularizers.hpp"
#include "disa/tensor.hpp"

namespace disa::checkpoint {

inline constexpr std::uint32_t kFormatVersion = 1;

using Blocks = std::map<std::string, ad::Tensor>;

void add_backbone(Blocks& blocks, const encoders::DualEncoder& encoder);
void add_prompts(Blocks& blocks, const encoders::PromptBank& prompts);
void add_prototypes(Blocks& blocks, const regularizers::PrototypeTable& table);

// Refuses to replace an existing file unless its bytes would be identical.
void write(const std::filesystem::path& path, const Blocks& blocks);
Blocks read(const std::filesystem::path& path);

bool has_backbone(const Blocks& blocks);
bool has_prompts(const Blocks& blocks);
bool has_prototypes(const Blocks& blocks);

// Copies every backbone block into the encoder, which must still be
// unfrozen; every encoder tensor must be present.
void restore_backbone(const Blocks& blocks, encoders::DualEncoder& encoder);
encoders::PromptBank restore_prompts(const Blocks& blocks);
regularizers::PrototypeTable restore_prototypes(const Blocks& blocks);

}  // namespace disa::checkpoint
