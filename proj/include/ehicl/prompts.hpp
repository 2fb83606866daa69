// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string_view>

namespace ehicl::prompts {

// Verbatim texts from config/prompts, compiled in at configure time.
extern const std::string_view kClassifySystem;
extern const std::string_view kClassifyUser;
extern const std::string_view kDescribeDescriptionUser;
extern const std::string_view kDescribeReasoningSystem;
extern const std::string_view kDescribeReasoningUser;

}  // namespace ehicl::prompts
