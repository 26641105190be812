#pragma once

#include <string>
#include <string_view>

namespace kdse::io {

std::string sha1_hex(std::string_view bytes);
/// Hash git assigns to a blob with this content.
std::string git_blob_hash(std::string_view content);

}  // namespace kdse::io
