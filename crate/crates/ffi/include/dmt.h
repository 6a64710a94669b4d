#ifndef DMT_H
#define DMT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum DmtStatus {
  DMT_STATUS_OK = 0,
  DMT_STATUS_NULL_ARGUMENT = 1,
  DMT_STATUS_INVALID_UTF8 = 2,
  DMT_STATUS_INVALID_ARGUMENT = 3,
  DMT_STATUS_IO = 4,
  DMT_STATUS_CHECKPOINT = 5,
  DMT_STATUS_DECODE = 6,
  DMT_STATUS_BLEU = 7,
  DMT_STATUS_PANIC = 8,
} DmtStatus;

// A loaded model with its text pipeline and decoding settings.
typedef struct DmtTranslator DmtTranslator;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *dmt_version(void);

// Message of the last failed call on this thread, or null. Valid until the
// next call into the library on this thread.
const char *dmt_last_error(void);

// Loads a checkpoint with its merge file and vocabularies. Decoding
// defaults to beam 5 with length penalty 1.0.
//
// # Safety
// String arguments are NUL-terminated; `out` is writable.
enum DmtStatus dmt_translator_open(const char *checkpoint,
                                   const char *codes,
                                   const char *src_vocab,
                                   const char *tgt_vocab,
                                   const char *src_lang,
                                   const char *tgt_lang,
                                   bool transliterate,
                                   struct DmtTranslator **out);

// Sets the beam width, length penalty and output cap (0 means automatic).
//
// # Safety
// `translator` comes from [`dmt_translator_open`].
enum DmtStatus dmt_translator_set_decode(struct DmtTranslator *translator,
                                         size_t beam,
                                         double length_penalty,
                                         size_t max_len);

// Translates one line; the result goes to `*out`.
//
// # Safety
// `translator` comes from [`dmt_translator_open`]; `source` is
// NUL-terminated; `out` is writable.
enum DmtStatus dmt_translate(const struct DmtTranslator *translator,
                             const char *source,
                             char **out);

// # Safety
// `translator` is null or comes from [`dmt_translator_open`] and is not
// used afterwards.
void dmt_translator_free(struct DmtTranslator *translator);

// Sentence BLEU of a whitespace-tokenized candidate against one reference.
//
// # Safety
// Strings are NUL-terminated; `out` is writable.
enum DmtStatus dmt_sentence_bleu(const char *candidate, const char *reference, double *out);

// Maps text between Indic scripts named like `kannada` or `deva`.
//
// # Safety
// Strings are NUL-terminated; `out` is writable.
enum DmtStatus dmt_transliterate(const char *input, const char *from, const char *to, char **out);

// Releases a string returned by the library.
//
// # Safety
// `s` is null or was returned through an output pointer of this library
// and is not used afterwards.
void dmt_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DMT_H */
