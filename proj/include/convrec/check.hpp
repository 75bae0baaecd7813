#pragma once

#include <stdexcept>
#include <string>

namespace convrec::detail {

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

}  // namespace convrec::detail
