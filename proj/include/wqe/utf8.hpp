#pragma once

#include <string>
#include <string_view>

namespace wqe::utf8 {

// Decodes UTF-8 into Unicode scalar values. Throws InvalidInput on malformed input.
std::u32string decode(std::string_view text);
std::string encode(std::u32string_view text);

// Length in scalar values.
std::size_t length(std::string_view text);

bool is_space(char32_t c) noexcept;

}  // namespace wqe::utf8
