"""Fixed vocabularies of the synthetic store: query terms, element names, page filler."""

from __future__ import annotations

from .subtypes import ClickSubtype

CATEGORY_NOUNS: dict[str, tuple[str, ...]] = {
    "audio": ("earbuds", "headphones", "speaker", "soundbar", "microphone", "turntable", "amplifier"),
    "kitchen": ("blender", "skillet", "kettle", "toaster", "knife", "cookware", "airfryer"),
    "fitness": ("dumbbells", "yogamat", "treadmill", "kettlebell", "bands", "tracker", "bottle"),
    "books": ("novel", "cookbook", "biography", "atlas", "journal", "comics", "dictionary"),
    "toys": ("lego", "puzzle", "drone", "doll", "boardgame", "plush", "blocks"),
    "beauty": ("serum", "shampoo", "lipstick", "sunscreen", "perfume", "moisturizer", "razor"),
    "office": ("monitor", "keyboard", "mouse", "desk", "chair", "printer", "webcam"),
    "outdoor": ("tent", "backpack", "lantern", "hammock", "cooler", "sleepingbag", "compass"),
}

QUERY_NOUNS: tuple[str, ...] = tuple(n for nouns in CATEGORY_NOUNS.values() for n in nouns)

# Refinement words used when a shopper searches a second time.
MODIFIERS: tuple[str, ...] = ("cheap", "budget", "premium", "best", "brand", "new", "deal", "rated")

TRAIT_MODIFIER = {"price_sensitivity": "cheap", "brand_loyalty": "brand", "patience": "rated"}

QUERY_TERMS: tuple[str, ...] = QUERY_NOUNS + MODIFIERS

TRAITS: tuple[str, ...] = ("brand_loyalty", "patience", "price_sensitivity")

SEARCH_FIELD = "search_box"

ELEMENT_POOLS: dict[ClickSubtype, tuple[str, ...]] = {
    ClickSubtype.REVIEW: ("review_link", "see_all_reviews", "star_rating_summary", "customer_reviews_tab", "top_review_expand"),
    ClickSubtype.SEARCH: ("search_button", "search_submit", "search_icon"),
    ClickSubtype.PRODUCT_OPTION: ("option_color_black", "size_option_m", "variant_selector", "color_swatch_blue", "size_option_l"),
    ClickSubtype.PRODUCT_LINK: ("product_title_link", "product_image_link", "item_link_top", "product_card_first"),
    ClickSubtype.OTHER: ("learn_more_button", "share_icon", "wishlist_heart", "help_widget", "gift_wrap_toggle"),
    ClickSubtype.PURCHASE: ("buy_now", "proceed_to_checkout", "place_order", "purchase_button"),
    ClickSubtype.NAV_BAR: ("nav_home", "menu_toggle", "logo_home", "nav_deals"),
    ClickSubtype.PAGE_RELATED: ("next_page", "prev_page", "page_number_2", "next_results"),
    ClickSubtype.QUANTITY: ("qty_increase", "quantity_dropdown", "qty_decrease"),
    ClickSubtype.SUGGESTED_TERM: ("suggest_first", "suggestion_item", "suggested_query_link"),
    ClickSubtype.CART_SIDE_BAR: ("cart_side_view", "cart_side_close"),
    ClickSubtype.CART_PAGE_SELECT: ("cart_item_checkbox", "cart_select_all", "cart_item_remove"),
    ClickSubtype.FILTER: ("filter_price", "sort_by_price", "filter_brand", "sort_by_newest", "filter_prime"),
}

ELEMENT_LABELS: dict[ClickSubtype, str] = {
    ClickSubtype.REVIEW: "Customer reviews",
    ClickSubtype.SEARCH: "Go",
    ClickSubtype.PRODUCT_OPTION: "Choose option",
    ClickSubtype.PRODUCT_LINK: "View product",
    ClickSubtype.OTHER: "More",
    ClickSubtype.PURCHASE: "Buy",
    ClickSubtype.NAV_BAR: "Menu",
    ClickSubtype.PAGE_RELATED: "Next",
    ClickSubtype.QUANTITY: "Qty",
    ClickSubtype.SUGGESTED_TERM: "Suggestion",
    ClickSubtype.CART_SIDE_BAR: "Cart",
    ClickSubtype.CART_PAGE_SELECT: "Select",
    ClickSubtype.FILTER: "Refine",
}

FILLER_WORDS: tuple[str, ...] = tuple(
    """
    free delivery eligible orders shipped sold by ships from returns policy details
    customers also viewed frequently bought together about this item product information
    technical specifications warranty manufacturer dimensions weight model number batteries
    included color material brand style pattern compatible devices price per unit list
    limited time deal save coupon applied checkout subscribe monthly packaging arrives
    tomorrow stock available options gift receipt questions answers sponsored results
    """.split()
)
