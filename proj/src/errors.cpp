// SPDX-License-Identifier: Apache-2.0

#include "exmerge/errors.hpp"

namespace exmerge {

std::string_view to_string(ErrorKind kind) noexcept {
    switch (kind) {
        case ErrorKind::Validation: return "validation";
        case ErrorKind::Compatibility: return "compatibility";
        case ErrorKind::Io: return "io";
    }
    return "unknown";
}

}  // namespace exmerge
