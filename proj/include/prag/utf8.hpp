#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace prag::utf8 {

/// Decodes UTF-8 into scalar values. Invalid bytes decode to U+FFFD one byte
/// at a time, so the function never fails.
std::vector<char32_t> decode(std::string_view text);

void append(std::string& out, char32_t cp);
std::string encode(const std::vector<char32_t>& cps);

/// Number of Unicode scalar values.
std::size_t count_scalars(std::string_view text);

/// Replaces invalid sequences with U+FFFD; valid input is returned unchanged.
std::string sanitize(std::string_view bytes);

bool is_cjk_ideograph(char32_t cp);

}  // namespace prag::utf8
